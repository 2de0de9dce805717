//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computation goes
//! through a [`Tape`]: values are pushed as nodes, every operation records
//! what it needs for the backward sweep, and [`Tape::backward`] walks the
//! nodes in exact reverse order accumulating gradients.
//!
//! Images and feature maps use the `N×C×H×W` layout throughout.

mod conv;
pub mod gradcheck;
mod resample;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{ConvSpec, PadMode, Padding};
pub use resample::AxisWeights;
pub use tape::{Tape, Var};

/// Scalar element type. Implemented for `f32` (training and inference) and
/// `f64` (gradient verification).
pub trait Real:
    Float + Default + Debug + Sum + Send + Sync + std::ops::AddAssign + std::ops::MulAssign + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let reach = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
                };
                if k > 0 {
                    assert!(reach(m, k, a_strides) < a.len(), "gemm: lhs out of bounds");
                    assert!(reach(k, n, b_strides) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(m * n <= c.len(), "gemm: output out of bounds");
                // SAFETY: bounds of all three operands were checked above and
                // `c` is a distinct, exclusively borrowed buffer.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self
            .zip_map(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Precision conversion (weights are stored as f32, verified in f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Dimensions of an `N×C×H×W` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected N×C×H×W, got {:?}",
                self.shape
            ))),
        }
    }

    /// Spatial crop of an `N×C×H×W` tensor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "crop {height}×{width}@({top},{left}) outside {h}×{w}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in self.data.chunks_exact(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        Tensor::from_vec(&[n, c, height, width], out)
    }

    /// Reflect-pads the spatial dims of an `N×C×H×W` tensor on the bottom and
    /// right edges.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if (bottom > 0 && bottom >= h) || (right > 0 && right >= w) {
            return Err(Error::dim(format!(
                "reflect pad ({bottom},{right}) too large for {h}×{w}"
            )));
        }
        let (oh, ow) = (h + bottom, w + right);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks_exact(h * w) {
            for y in 0..oh {
                let sy = conv::reflect(y as isize, h);
                for x in 0..ow {
                    out.push(plane[sy * w + conv::reflect(x as isize, w)]);
                }
            }
        }
        Tensor::from_vec(&[n, c, oh, ow], out)
    }
}
