use std::sync::Arc;

use super::conv::{self, ConvSpec};
use super::resample::{self, AxisWeights};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Resample {
        x: Var,
        rows: Arc<AxisWeights>,
        cols: Arc<AxisWeights>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        k: T,
    },
    Shift {
        x: Var,
    },
    Outer3 {
        h: Var,
        w: Var,
        c: Var,
    },
    MatMul3 {
        a: Var,
        x: Var,
    },
    Pow {
        x: Var,
        g: Var,
        eps: T,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Clamp {
        x: Var,
        lo: Option<T>,
        hi: Option<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    AvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Partition {
        x: Var,
        s: usize,
    },
    Merge {
        x: Var,
        s: usize,
    },
    Compose {
        h: Var,
        w: Var,
        c: Var,
        s: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are immutable once pushed. Gradients of leaf nodes survive
/// [`Tape::backward`]; intermediate gradients are dropped as soon as they
/// have been propagated.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    macs: u64,
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

/// For each element of `a_shape`, the flat index of the broadcast element
/// of `b_shape`. `b` must have the same rank with every dim equal or 1.
fn broadcast_map(op: &str, a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if a_shape.len() != b_shape.len()
        || a_shape.iter().zip(b_shape).any(|(&a, &b)| b != a && b != 1)
    {
        return Err(Error::dim(format!(
            "{op}: {b_shape:?} does not broadcast to {a_shape:?}"
        )));
    }
    let rank = a_shape.len();
    let mut b_strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by forward operations so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect
    /// to a leaf, if the leaf was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation over `N×C×H×W` input with `O×(C/groups)×kH×kW`
    /// weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (y, geom) = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        self.macs += geom.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.push("conv2d", y, Op::Conv { x, w, b, spec }, rg)
    }

    /// Separable linear resampling of the spatial dims.
    pub fn resample(
        &mut self,
        x: Var,
        rows: Arc<AxisWeights>,
        cols: Arc<AxisWeights>,
    ) -> Result<Var> {
        let y = resample::forward(self.value(x), &rows, &cols)?;
        let rg = self.any_grad(&[x]);
        self.push("resample", y, Op::Resample { x, rows, cols }, rg)
    }

    /// Bilinear doubling of H and W.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resample(
            x,
            Arc::new(AxisWeights::bilinear(h, 2 * h)),
            Arc::new(AxisWeights::bilinear(w, 2 * w)),
        )
    }

    /// Bilinear halving of H and W; with half-pixel centres this is the mean
    /// of each 2×2 block.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "downsample by 2 needs even dims, got {h}×{w}"
            )));
        }
        self.resample(
            x,
            Arc::new(AxisWeights::bilinear(h, h / 2)),
            Arc::new(AxisWeights::bilinear(w, w / 2)),
        )
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let y = if av.shape() == bv.shape() {
            av.zip_map(bv, f)?
        } else {
            let map = broadcast_map(name, av.shape(), bv.shape())?;
            let data = av
                .data()
                .iter()
                .zip(&map)
                .map(|(&x, &j)| f(x, bv.data()[j]))
                .collect();
            Tensor::from_vec(av.shape(), data)?
        };
        if kind == Binary::Mul {
            self.macs += y.len() as u64;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(name, y, Op::Binary { a, b, kind }, rg)
    }

    /// `a + b`; `b` may broadcast along size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * k);
        let rg = self.any_grad(&[x]);
        self.push("scale", y, Op::Scale { x, k }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        let y = self.value(x).map(|v| v + k);
        let rg = self.any_grad(&[x]);
        self.push("add_scalar", y, Op::Shift { x }, rg)
    }

    /// Rank-1 three-way outer product `o[i,j,c] = h[i]·w[j]·c[c]`.
    pub fn outer3(&mut self, h: Var, w: Var, c: Var) -> Result<Var> {
        for v in [h, w, c] {
            if self.shape(v).len() != 1 {
                return Err(Error::dim(format!(
                    "outer3 factors must be 1-D, got {:?}",
                    self.shape(v)
                )));
            }
        }
        let (hv, wv, cv) = (
            self.value(h).data(),
            self.value(w).data(),
            self.value(c).data(),
        );
        let mut out = Vec::with_capacity(hv.len() * wv.len() * cv.len());
        for &a in hv {
            for &b in wv {
                let ab = a * b;
                out.extend(cv.iter().map(|&c| ab * c));
            }
        }
        let y = Tensor::from_vec(&[hv.len(), wv.len(), cv.len()], out)?;
        self.macs += 2 * y.len() as u64;
        let rg = self.any_grad(&[h, w, c]);
        self.push("outer3", y, Op::Outer3 { h, w, c }, rg)
    }

    /// Left-multiplies every pixel's colour vector by a 3×3 matrix. `a` is
    /// `3×3` (shared) or `N×3×3` (per image); `x` is `N×3×H×W`.
    pub fn matmul3(&mut self, a: Var, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c != 3 {
            return Err(Error::dim(format!(
                "matmul3 needs 3 colour channels, got {c}"
            )));
        }
        let per_image = match self.shape(a) {
            [3, 3] => false,
            [m, 3, 3] if *m == n => true,
            s => {
                return Err(Error::dim(format!(
                    "matmul3 matrix must be 3×3 or N×3×3, got {s:?}"
                )))
            }
        };
        let (av, xv) = (self.value(a).data(), self.value(x).data());
        let hw = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            let m = if per_image {
                &av[b * 9..b * 9 + 9]
            } else {
                &av[..9]
            };
            let src = &xv[b * 3 * hw..(b + 1) * 3 * hw];
            let dst = &mut out[b * 3 * hw..(b + 1) * 3 * hw];
            for i in 0..3 {
                for j in 0..3 {
                    let k = m[i * 3 + j];
                    for p in 0..hw {
                        dst[i * hw + p] += k * src[j * hw + p];
                    }
                }
            }
        }
        self.macs += 3 * xv.len() as u64;
        let y = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[a, x]);
        self.push("matmul3", y, Op::MatMul3 { a, x }, rg)
    }

    /// `max(x, eps)^g` for `x: N×C×H×W`. `g` holds one exponent per image
    /// (`[1]`, `[N,1]`) or per image and channel (`[N,C]`); all must be
    /// positive.
    pub fn pow_gamma(&mut self, x: Var, g: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let gidx = self.gamma_index(g, n, c)?;
        let gv = self.value(g).data();
        if gv.iter().any(|&v| v <= T::zero()) {
            return Err(Error::config("gamma must be positive"));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(eps).powf(gv[gidx(i / hw)]))
            .collect();
        let y = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[x, g]);
        self.push("pow_gamma", y, Op::Pow { x, g, eps }, rg)
    }

    /// Maps a plane index `n*C + c` to the exponent's flat index.
    fn gamma_index(&self, g: Var, n: usize, c: usize) -> Result<impl Fn(usize) -> usize> {
        let (gn, gc) = match *self.shape(g) {
            [1] => (1, 1),
            [a, b] if (a == n || a == 1) && (b == 1 || b == c) => (a, b),
            ref s => {
                return Err(Error::dim(format!(
                    "gamma shape {s:?} incompatible with {n} images of {c} channels"
                )))
            }
        };
        Ok(move |plane: usize| {
            let (b, ch) = (plane / c, plane % c);
            (b % gn) * gc + ch % gc
        })
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(T) -> T) = match kind {
            Unary::Relu => ("relu", |v| v.max(T::zero())),
            Unary::Tanh => ("tanh", |v| v.tanh()),
            Unary::Sigmoid => ("sigmoid", |v| T::one() / (T::one() + (-v).exp())),
            Unary::Abs => ("abs", |v| v.abs()),
        };
        let y = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(name, y, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: Option<T>, hi: Option<T>) -> Result<Var> {
        let y = self.value(x).map(|v| {
            let v = lo.map_or(v, |l| v.max(l));
            hi.map_or(v, |h| v.min(h))
        });
        let rg = self.any_grad(&[x]);
        self.push("clamp", y, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push("sum", y, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push("mean", y, Op::Mean { x }, rg)
    }

    /// Global average pool `N×C×H×W → N×C`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&[n, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push("avg_pool", y, Op::AvgPool { x }, rg)
    }

    /// `x·wᵀ + b` for `x: N×I`, `w: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = match *self.shape(x) {
            [n, i] => (n, i),
            ref s => return Err(Error::dim(format!("linear input must be N×I, got {s:?}"))),
        };
        let o = match *self.shape(w) {
            [o, wi] if wi == i => o,
            ref s => {
                return Err(Error::dim(format!(
                    "linear weight {s:?} does not match input width {i}"
                )))
            }
        };
        same_shape("linear bias", self.shape(b), &[o])?;
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            T::one(),
            &mut out,
        );
        self.macs += (n * i * o) as u64;
        let y = Tensor::from_vec(&[n, o], out)?;
        let rg = self.any_grad(&[x, w, b]);
        self.push("linear", y, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", y, Op::Reshape { x }, rg)
    }

    /// Concatenates `N×Cᵢ×H×W` tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::usage("concat of nothing"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut ctot = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            ctot += vc;
        }
        let mut out = Vec::with_capacity(n * ctot * h * w);
        for b in 0..n {
            for &v in xs {
                let val = self.value(v);
                let per = val.len() / n;
                out.extend_from_slice(&val.data()[b * per..(b + 1) * per]);
            }
        }
        let y = Tensor::from_vec(&[n, ctot, h, w], out)?;
        let rg = self.any_grad(xs);
        self.push("concat", y, Op::Concat { xs: xs.to_vec() }, rg)
    }

    /// Channels `start..start+len` of an `N×C×H×W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "channel slice {start}..{} outside {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(
                &self.value(x).data()[(b * c + start) * hw..(b * c + start + len) * hw],
            );
        }
        let y = Tensor::from_vec(&[n, len, h, w], out)?;
        let rg = self.any_grad(&[x]);
        self.push("slice_channels", y, Op::Slice { x, start }, rg)
    }

    /// `N×C×H×W → (N·H/s·W/s)×C×s×s`, windows in row-major grid order.
    pub fn window_partition(&mut self, x: Var, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim(format!(
                "{h}×{w} not divisible into {s}×{s} windows"
            )));
        }
        let (gh, gw) = (h / s, w / s);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    for ch in 0..c {
                        let plane = &xv[(b * c + ch) * h * w..];
                        for y in gy * s..(gy + 1) * s {
                            out.extend_from_slice(&plane[y * w + gx * s..y * w + (gx + 1) * s]);
                        }
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[n * gh * gw, c, s, s], out)?;
        let rg = self.any_grad(&[x]);
        self.push("window_partition", y, Op::Partition { x, s }, rg)
    }

    /// Inverse of [`window_partition`](Self::window_partition) onto an
    /// `N×C×H×W` canvas.
    pub fn window_merge(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (nw, c, s, s2) = self.value(x).dims4()?;
        if s != s2 || !h.is_multiple_of(s) || !w.is_multiple_of(s) || nw != n * (h / s) * (w / s) {
            return Err(Error::dim(format!(
                "cannot merge {:?} windows into {n}×{c}×{h}×{w}",
                self.shape(x)
            )));
        }
        let y = merge_windows(self.value(x).data(), n, c, h, w, s);
        let y = Tensor::from_vec(&[n, c, h, w], y)?;
        let rg = self.any_grad(&[x]);
        self.push("window_merge", y, Op::Merge { x, s }, rg)
    }

    /// Per-window rank-1 composition. `h, w: N×s×Gh×Gw`, `c: N×C×Gh×Gw`;
    /// the result `N×C×(Gh·s)×(Gw·s)` holds, inside window `(gy, gx)`,
    /// `h[y]·w[x]·c[ch]` of that window's factors.
    pub fn window_compose(&mut self, h: Var, w: Var, c: Var) -> Result<Var> {
        let (n, s, gh, gw) = self.value(h).dims4()?;
        let wd = self.value(w).dims4()?;
        let (cn, ch, cgh, cgw) = self.value(c).dims4()?;
        if wd != (n, s, gh, gw) || (cn, cgh, cgw) != (n, gh, gw) {
            return Err(Error::dim(format!(
                "window_compose factor shapes disagree: {:?} {:?} {:?}",
                self.shape(h),
                self.shape(w),
                self.shape(c)
            )));
        }
        let (hh, ww) = (gh * s, gw * s);
        let (hv, wv, cv) = (
            self.value(h).data(),
            self.value(w).data(),
            self.value(c).data(),
        );
        let g2 = gh * gw;
        let mut out = vec![T::zero(); n * ch * hh * ww];
        for b in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    let cell = gy * gw + gx;
                    for i in 0..s {
                        let fh = hv[(b * s + i) * g2 + cell];
                        let y = gy * s + i;
                        for j in 0..s {
                            let hw_ = fh * wv[(b * s + j) * g2 + cell];
                            let x = gx * s + j;
                            for k in 0..ch {
                                out[((b * ch + k) * hh + y) * ww + x] =
                                    hw_ * cv[(b * ch + k) * g2 + cell];
                            }
                        }
                    }
                }
            }
        }
        self.macs += 2 * out.len() as u64;
        let y = Tensor::from_vec(&[n, ch, hh, ww], out)?;
        let rg = self.any_grad(&[h, w, c]);
        self.push("window_compose", y, Op::Compose { h, w, c, s }, rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, gv) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gv.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    /// Input gradients of node `i` given its output gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let need = (rg(*x), rg(*w), b.is_some_and(rg));
                let grads = conv::backward(self.value(*x), self.value(*w), spec, g, need)?;
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Resample { x, rows, cols } => {
                out.push((*x, resample::backward(self.shape(*x), rows, cols, g)?));
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let map = (av.shape() != bv.shape())
                    .then(|| broadcast_map("grad", av.shape(), bv.shape()))
                    .transpose()?;
                let bidx = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                if rg(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            Tensor::from_fn(av.shape(), |k| g.data()[k] * bv.data()[bidx(k)])
                        }
                    };
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    for (k, &gk) in g.data().iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * av.data()[k],
                        };
                        gb.data_mut()[bidx(k)] += d;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale { x, k } => out.push((*x, g.map(|v| v * *k))),
            Op::Shift { x } => out.push((*x, g.clone())),
            Op::Outer3 { h, w, c } => {
                let (hv, wv, cv) = (
                    self.value(*h).data(),
                    self.value(*w).data(),
                    self.value(*c).data(),
                );
                let (sw, sc) = (wv.len(), cv.len());
                let mut gh = vec![T::zero(); hv.len()];
                let mut gw = vec![T::zero(); sw];
                let mut gc = vec![T::zero(); sc];
                for (i, &a) in hv.iter().enumerate() {
                    for (j, &b) in wv.iter().enumerate() {
                        let row = &g.data()[(i * sw + j) * sc..(i * sw + j + 1) * sc];
                        let dot: T = row.iter().zip(cv).map(|(&x, &y)| x * y).sum();
                        gh[i] += b * dot;
                        gw[j] += a * dot;
                        let ab = a * b;
                        for (k, &r) in row.iter().enumerate() {
                            gc[k] += ab * r;
                        }
                    }
                }
                out.push((*h, Tensor::from_vec(&[hv.len()], gh)?));
                out.push((*w, Tensor::from_vec(&[sw], gw)?));
                out.push((*c, Tensor::from_vec(&[sc], gc)?));
            }
            Op::MatMul3 { a, x } => {
                let (n, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let (av, xv) = (self.value(*a).data(), self.value(*x).data());
                let per_image = self.shape(*a).len() == 3;
                let mut ga = vec![T::zero(); av.len()];
                let mut gx = vec![T::zero(); xv.len()];
                for b in 0..n {
                    let off = if per_image { b * 9 } else { 0 };
                    let gs = &g.data()[b * 3 * hw..(b + 1) * 3 * hw];
                    let xs = &xv[b * 3 * hw..(b + 1) * 3 * hw];
                    for i in 0..3 {
                        for j in 0..3 {
                            let k = av[off + i * 3 + j];
                            let mut acc = T::zero();
                            for p in 0..hw {
                                acc += gs[i * hw + p] * xs[j * hw + p];
                                gx[b * 3 * hw + j * hw + p] += k * gs[i * hw + p];
                            }
                            ga[off + i * 3 + j] += acc;
                        }
                    }
                }
                out.push((*a, Tensor::from_vec(self.shape(*a), ga)?));
                out.push((*x, Tensor::from_vec(self.shape(*x), gx)?));
            }
            Op::Pow { x, g: gam, eps } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let gidx = self.gamma_index(*gam, n, c)?;
                let hw = h * w;
                let (xv, gv) = (self.value(*x).data(), self.value(*gam).data());
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); gv.len()];
                for (k, (&xk, &gk)) in xv.iter().zip(g.data()).enumerate() {
                    let e = gidx(k / hw);
                    let base = xk.max(*eps);
                    if xk > *eps {
                        gx[k] = gk * gv[e] * y.data()[k] / base;
                    }
                    gg[e] += gk * y.data()[k] * base.ln();
                }
                out.push((*x, Tensor::from_vec(self.shape(*x), gx)?));
                out.push((*gam, Tensor::from_vec(self.shape(*gam), gg)?));
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let d = Tensor::from_fn(xv.shape(), |k| {
                    let (xk, yk) = (xv.data()[k], y.data()[k]);
                    let slope = match kind {
                        Unary::Relu => {
                            if xk > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Tanh => T::one() - yk * yk,
                        Unary::Sigmoid => yk * (T::one() - yk),
                        Unary::Abs => {
                            if xk > T::zero() {
                                T::one()
                            } else if xk < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    slope * g.data()[k]
                });
                out.push((*x, d));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = Tensor::from_fn(xv.shape(), |k| {
                    let v = xv.data()[k];
                    let inside = lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v <= h);
                    if inside {
                        g.data()[k]
                    } else {
                        T::zero()
                    }
                });
                out.push((*x, d));
            }
            Op::Sum { x } => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean { x } => {
                let n = T::from_f64(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::AvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let d = Tensor::from_fn(self.shape(*x), |k| g.data()[k / (h * w)] * inv);
                out.push((*x, d));
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if rg(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        g.data(),
                        (o as isize, 1),
                        self.value(*w).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut gx,
                    );
                    out.push((*x, Tensor::from_vec(&[n, i], gx)?));
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        g.data(),
                        (1, o as isize),
                        self.value(*x).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut gw,
                    );
                    out.push((*w, Tensor::from_vec(&[o, i], gw)?));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.data().chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, Tensor::from_vec(&[o], gb)?));
                }
            }
            Op::Reshape { x } => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Concat { xs } => {
                let n = y.shape()[0];
                let per_out = y.len() / n;
                let mut offset = 0;
                for &v in xs {
                    let per = self.value(v).len() / n;
                    let mut d = Vec::with_capacity(per * n);
                    for b in 0..n {
                        d.extend_from_slice(
                            &g.data()[b * per_out + offset..b * per_out + offset + per],
                        );
                    }
                    offset += per;
                    out.push((v, Tensor::from_vec(self.shape(v), d)?));
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = y.shape()[1];
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    d[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                out.push((*x, Tensor::from_vec(&[n, c, h, w], d)?));
            }
            Op::Partition { x, s } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                out.push((
                    *x,
                    Tensor::from_vec(&[n, c, h, w], merge_windows(g.data(), n, c, h, w, *s))?,
                ));
            }
            Op::Merge { x, s } => {
                let (n, c, h, w) = y.dims4()?;
                out.push((
                    *x,
                    Tensor::from_vec(self.shape(*x), partition_windows(g.data(), n, c, h, w, *s))?,
                ));
            }
            Op::Compose { h, w, c, s } => {
                let s = *s;
                let (n, _, gh, gw) = self.value(*h).dims4()?;
                let ch = self.shape(*c)[1];
                let (hh, ww) = (gh * s, gw * s);
                let g2 = gh * gw;
                let (hv, wv, cv) = (
                    self.value(*h).data(),
                    self.value(*w).data(),
                    self.value(*c).data(),
                );
                let mut gh_ = vec![T::zero(); hv.len()];
                let mut gw_ = vec![T::zero(); wv.len()];
                let mut gc_ = vec![T::zero(); cv.len()];
                for b in 0..n {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let cell = gy * gw + gx;
                            for i in 0..s {
                                let fh = hv[(b * s + i) * g2 + cell];
                                for j in 0..s {
                                    let fw = wv[(b * s + j) * g2 + cell];
                                    let (y, x) = (gy * s + i, gx * s + j);
                                    let mut dot = T::zero();
                                    for k in 0..ch {
                                        let gk = g.data()[((b * ch + k) * hh + y) * ww + x];
                                        dot += gk * cv[(b * ch + k) * g2 + cell];
                                        gc_[(b * ch + k) * g2 + cell] += gk * fh * fw;
                                    }
                                    gh_[(b * s + i) * g2 + cell] += dot * fw;
                                    gw_[(b * s + j) * g2 + cell] += dot * fh;
                                }
                            }
                        }
                    }
                }
                out.push((*h, Tensor::from_vec(self.shape(*h), gh_)?));
                out.push((*w, Tensor::from_vec(self.shape(*w), gw_)?));
                out.push((*c, Tensor::from_vec(self.shape(*c), gc_)?));
            }
        }
        Ok(out)
    }
}

fn merge_windows<T: Real>(src: &[T], n: usize, c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (gh, gw) = (h / s, w / s);
    let mut out = vec![T::zero(); n * c * h * w];
    let mut k = 0;
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    let plane = &mut out[(b * c + ch) * h * w..];
                    for y in gy * s..(gy + 1) * s {
                        plane[y * w + gx * s..y * w + (gx + 1) * s].copy_from_slice(&src[k..k + s]);
                        k += s;
                    }
                }
            }
        }
    }
    out
}

fn partition_windows<T: Real>(
    src: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (gh, gw) = (h / s, w / s);
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * h * w..];
                    for y in gy * s..(gy + 1) * s {
                        out.extend_from_slice(&plane[y * w + gx * s..y * w + (gx + 1) * s]);
                    }
                }
            }
        }
    }
    out
}
