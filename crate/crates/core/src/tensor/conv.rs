use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

/// Per-edge padding amounts. Asymmetric amounts are allowed so that even
/// kernels can still have a "center" tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn none() -> Self {
        Self::uniform(PadMode::Zero, 0)
    }

    pub fn uniform(mode: PadMode, amount: usize) -> Self {
        Self {
            mode,
            top: amount,
            bottom: amount,
            left: amount,
            right: amount,
        }
    }

    /// Output size equals input size at stride 1. For an even kernel the
    /// extra sample goes before, so tap `k/2` is the center.
    pub fn same(mode: PadMode, kernel: usize) -> Self {
        let before = kernel / 2;
        let after = kernel - 1 - before;
        Self {
            mode,
            top: before,
            bottom: after,
            left: before,
            right: after,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: Padding, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride-1, size-preserving, ungrouped.
    pub fn same(mode: PadMode, kernel: usize) -> Self {
        Self::new(1, Padding::same(mode, kernel), 1)
    }
}

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = i.rem_euclid(period);
    if i >= n as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pub ho: usize,
    pub wo: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    pub(crate) fn new(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<Self> {
        let (n, cin, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d input must be N×C×H×W, got {x:?}"
                )))
            }
        };
        let (cout, cin_g, kh, kw) = match *w {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d weight must be O×I×kH×kW, got {w:?}"
                )))
            }
        };
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::config(format!(
                "groups={g} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if cin / g != cin_g {
            return Err(Error::dim(format!(
                "weight expects {cin_g} channels per group, input gives {}",
                cin / g
            )));
        }
        if spec.stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let p = spec.padding;
        if p.mode == PadMode::Reflect
            && (p.top.max(p.bottom) >= h.max(2) || p.left.max(p.right) >= wd.max(2))
        {
            return Err(Error::dim(format!(
                "reflect padding {p:?} needs spatial dims larger than the pad, got {h}×{wd}"
            )));
        }
        let ph = h + p.top + p.bottom;
        let pw = wd + p.left + p.right;
        if ph < kh || pw < kw {
            return Err(Error::dim(format!(
                "kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            )));
        }
        Ok(Self {
            n,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            groups: g,
            cin_g,
            cout_g: cout / g,
        })
    }

    pub(crate) fn macs(&self) -> u64 {
        (self.n * self.cout * self.cin_g * self.kh * self.kw * self.ho * self.wo) as u64
    }

    fn patch_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.padding == Padding::none()
    }
}

/// Source index for every (tap, output position) pair along one axis.
fn axis_table(
    len: usize,
    taps: usize,
    out: usize,
    stride: usize,
    before: usize,
    mode: PadMode,
) -> Vec<Option<usize>> {
    let mut table = Vec::with_capacity(taps * out);
    for k in 0..taps {
        for o in 0..out {
            let src = (o * stride + k) as isize - before as isize;
            table.push(if (0..len as isize).contains(&src) {
                Some(src as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => Some(reflect(src, len)),
                }
            });
        }
    }
    table
}

struct Tables {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl Tables {
    fn new(g: &Geometry, spec: &ConvSpec) -> Self {
        let p = spec.padding;
        Self {
            rows: axis_table(g.h, g.kh, g.ho, spec.stride, p.top, p.mode),
            cols: axis_table(g.w, g.kw, g.wo, spec.stride, p.left, p.mode),
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, t: &Tables, col: &mut [T]) {
    let (howo, hw) = (g.ho * g.wo, g.h * g.w);
    let mut r = 0;
    for ci in 0..g.cin_g {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let rows = &t.rows[ky * g.ho..(ky + 1) * g.ho];
            for kx in 0..g.kw {
                let cols = &t.cols[kx * g.wo..(kx + 1) * g.wo];
                let dst = &mut col[r * howo..(r + 1) * howo];
                for (oy, sy) in rows.iter().enumerate() {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match sy {
                        None => line.fill(T::zero()),
                        Some(sy) => {
                            let src = &plane[sy * g.w..(sy + 1) * g.w];
                            for (d, sx) in line.iter_mut().zip(cols) {
                                *d = sx.map_or(T::zero(), |sx| src[sx]);
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, t: &Tables, dx: &mut [T]) {
    let (howo, hw) = (g.ho * g.wo, g.h * g.w);
    let mut r = 0;
    for ci in 0..g.cin_g {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let rows = &t.rows[ky * g.ho..(ky + 1) * g.ho];
            for kx in 0..g.kw {
                let cols = &t.cols[kx * g.wo..(kx + 1) * g.wo];
                let src = &col[r * howo..(r + 1) * howo];
                for (oy, sy) in rows.iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[sy * g.w..(sy + 1) * g.w];
                    for (&v, sx) in line.iter().zip(cols) {
                        if let Some(sx) = sx {
                            dst[*sx] += v;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Geometry)> {
    let g = Geometry::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(Error::dim(format!(
                "conv2d bias must have shape [{}], got {:?}",
                g.cout,
                b.shape()
            )));
        }
    }
    let t = Tables::new(&g, spec);
    let (howo, plen) = (g.ho * g.wo, g.patch_len());
    let pointwise = g.is_pointwise(spec);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); plen * howo]
    };
    let mut out = vec![T::zero(); g.n * g.cout * howo];
    let in_group = g.cin_g * g.h * g.w;
    for n in 0..g.n {
        for gi in 0..g.groups {
            let xs = &x.data()[(n * g.groups + gi) * in_group..][..in_group];
            let lhs = &w.data()[gi * g.cout_g * plen..][..g.cout_g * plen];
            let dst = &mut out[(n * g.cout + gi * g.cout_g) * howo..][..g.cout_g * howo];
            let rhs: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &g, &t, &mut col);
                &col
            };
            T::gemm(
                g.cout_g,
                plen,
                howo,
                lhs,
                (plen as isize, 1),
                rhs,
                (howo as isize, 1),
                T::zero(),
                dst,
            );
        }
        if let Some(b) = b {
            for (c, plane) in out[n * g.cout * howo..][..g.cout * howo]
                .chunks_exact_mut(howo)
                .enumerate()
            {
                let bias = b.data()[c];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok((Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)?, g))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    gy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_dx, need_dw, need_db) = need;
    let g = Geometry::new(x.shape(), w.shape(), spec)?;
    let t = Tables::new(&g, spec);
    let (howo, plen) = (g.ho * g.wo, g.patch_len());
    let pointwise = g.is_pointwise(spec);
    let in_group = g.cin_g * g.h * g.w;

    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); plen * howo];
    let mut dcol = if need_dx && !pointwise {
        vec![T::zero(); plen * howo]
    } else {
        Vec::new()
    };

    for n in 0..g.n {
        for gi in 0..g.groups {
            let xs = &x.data()[(n * g.groups + gi) * in_group..][..in_group];
            let gys = &gy.data()[(n * g.cout + gi * g.cout_g) * howo..][..g.cout_g * howo];
            let wg = &w.data()[gi * g.cout_g * plen..][..g.cout_g * plen];
            if let Some(dw) = dw.as_mut() {
                let rhs: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, &g, &t, &mut col);
                    &col
                };
                // dW_g += dY_g · colᵀ
                T::gemm(
                    g.cout_g,
                    howo,
                    plen,
                    gys,
                    (howo as isize, 1),
                    rhs,
                    (1, howo as isize),
                    T::one(),
                    &mut dw[gi * g.cout_g * plen..][..g.cout_g * plen],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[(n * g.groups + gi) * in_group..][..in_group];
                if pointwise {
                    // dX_g += W_gᵀ · dY_g
                    T::gemm(
                        plen,
                        g.cout_g,
                        howo,
                        wg,
                        (1, plen as isize),
                        gys,
                        (howo as isize, 1),
                        T::one(),
                        dxs,
                    );
                } else {
                    T::gemm(
                        plen,
                        g.cout_g,
                        howo,
                        wg,
                        (1, plen as isize),
                        gys,
                        (howo as isize, 1),
                        T::zero(),
                        &mut dcol,
                    );
                    col2im(&dcol, &g, &t, dxs);
                }
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for plane in gy.data().chunks_exact(howo).enumerate() {
            db[plane.0 % g.cout] += plane.1.iter().copied().sum::<T>();
        }
        Tensor::from_vec(&[g.cout], db)
    });
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        dw: dw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
        db: db.transpose()?,
    })
}
