//! Layer helpers shared by the coarse and fine models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ConvSpec, Real, Tape, Tensor, Var};
use crate::weights::{Bound, WeightStore};

/// He-normal conv weight `out×in×k×k` (fan-in `in·k²`) with zero bias.
pub fn init_conv<T: Real, R: Rng>(
    store: &mut WeightStore<T>,
    name: &str,
    out: usize,
    in_per_group: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (in_per_group * k * k) as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        normal(&[out, in_per_group, k, k], std, rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

/// Conv layer whose weight and bias start at zero.
pub fn zero_conv<T: Real>(
    store: &mut WeightStore<T>,
    name: &str,
    out: usize,
    in_per_group: usize,
    k: usize,
) {
    store.insert(
        format!("{name}.weight"),
        Tensor::zeros(&[out, in_per_group, k, k]),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

pub fn init_linear<T: Real, R: Rng>(
    store: &mut WeightStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    std: f64,
    rng: &mut R,
) {
    store.insert(format!("{name}.weight"), normal(&[out, inp], std, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

pub fn normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Applies the conv stored under `name` (`name.weight`, optional `name.bias`).
pub fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get_opt(&format!("{name}.bias"));
    tape.conv2d(x, w, b, spec)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.linear(x, w, b)
}
