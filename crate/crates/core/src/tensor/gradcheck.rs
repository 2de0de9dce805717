//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AxisWeights, ConvSpec, PadMode, Padding, Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step used by [`grad_check`].
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over all input elements of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_error: f64,
    /// `(input, element)` where the max was attained.
    pub worst: (usize, usize),
    pub tol: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tol
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
///
/// `f` receives a fresh tape and one trainable leaf per input and must
/// return a single-element result.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheck {
        max_error: 0.0,
        worst: (0, 0),
        tol,
        elements: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            report.elements += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = (i, k);
            }
        }
    }
    Ok(report)
}

/// Tolerance for the per-primitive suite in 64-bit arithmetic.
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// Values in `±[0.1, 1]`, so no sample sits on a kink at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ y·r` for a fixed pseudo-random `r`, so every output element carries
/// a distinct weight into the gradient.
fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let r = t.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))?;
    let yr = t.mul(y, r)?;
    t.sum(yr)
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    Vec<Tensor<f64>>,
);

/// Every differentiable tape primitive, each checked on its own.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let img = |r: &mut ChaCha8Rng| signed(r, &[2, 3, 4, 4]);
    let conv_zero = ConvSpec::same(PadMode::Zero, 3);
    let conv_reflect = ConvSpec::same(PadMode::Reflect, 3);
    let conv_strided = ConvSpec::new(2, Padding::uniform(PadMode::Zero, 1), 2);
    let bil = (
        Arc::new(AxisWeights::bilinear(4, 7)),
        Arc::new(AxisWeights::bilinear(4, 6)),
    );
    let area = (
        Arc::new(AxisWeights::area(4, 3)),
        Arc::new(AxisWeights::area(4, 2)),
    );
    let cases: Vec<Case> = vec![
        (
            "conv2d(zero pad)",
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), conv_zero)),
            vec![img(r), signed(r, &[2, 3, 3, 3]), signed(r, &[2])],
        ),
        (
            "conv2d(reflect pad)",
            Box::new(move |t, v| t.conv2d(v[0], v[1], None, conv_reflect)),
            vec![img(r), signed(r, &[2, 3, 3, 3])],
        ),
        (
            "conv2d(stride 2, groups 2)",
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), conv_strided)),
            vec![
                signed(r, &[1, 4, 6, 6]),
                signed(r, &[4, 2, 3, 3]),
                signed(r, &[4]),
            ],
        ),
        (
            "resample(bilinear)",
            Box::new(move |t, v| t.resample(v[0], bil.0.clone(), bil.1.clone())),
            vec![img(r)],
        ),
        (
            "resample(area)",
            Box::new(move |t, v| t.resample(v[0], area.0.clone(), area.1.clone())),
            vec![img(r)],
        ),
        (
            "upsample2",
            Box::new(|t, v| t.upsample2(v[0])),
            vec![img(r)],
        ),
        (
            "downsample2",
            Box::new(|t, v| t.downsample2(v[0])),
            vec![img(r)],
        ),
        (
            "add(broadcast)",
            Box::new(|t, v| t.add(v[0], v[1])),
            vec![img(r), signed(r, &[1, 3, 1, 1])],
        ),
        (
            "sub(broadcast)",
            Box::new(|t, v| t.sub(v[0], v[1])),
            vec![img(r), signed(r, &[2, 1, 4, 4])],
        ),
        (
            "mul(broadcast)",
            Box::new(|t, v| t.mul(v[0], v[1])),
            vec![img(r), signed(r, &[2, 3, 1, 1])],
        ),
        ("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![img(r)]),
        (
            "add_scalar",
            Box::new(|t, v| t.add_scalar(v[0], 0.3)),
            vec![img(r)],
        ),
        (
            "outer3",
            Box::new(|t, v| t.outer3(v[0], v[1], v[2])),
            vec![signed(r, &[3]), signed(r, &[4]), signed(r, &[2])],
        ),
        (
            "matmul3",
            Box::new(|t, v| t.matmul3(v[0], v[1])),
            vec![signed(r, &[2, 3, 3]), img(r)],
        ),
        (
            "pow_gamma",
            Box::new(|t, v| t.pow_gamma(v[0], v[1], 1e-4)),
            vec![
                positive(r, &[2, 3, 4, 4], 0.1, 1.0),
                positive(r, &[2, 1], 0.5, 3.0),
            ],
        ),
        ("relu", Box::new(|t, v| t.relu(v[0])), vec![img(r)]),
        ("tanh", Box::new(|t, v| t.tanh(v[0])), vec![img(r)]),
        ("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), vec![img(r)]),
        ("abs", Box::new(|t, v| t.abs(v[0])), vec![img(r)]),
        (
            "clamp",
            Box::new(|t, v| t.clamp(v[0], Some(-0.55), Some(0.45))),
            vec![img(r).map(|x| {
                if (x + 0.55).abs() < 0.02 || (x - 0.45).abs() < 0.02 {
                    x + 0.05
                } else {
                    x
                }
            })],
        ),
        ("sum", Box::new(|t, v| t.sum(v[0])), vec![img(r)]),
        ("mean", Box::new(|t, v| t.mean(v[0])), vec![img(r)]),
        ("avg_pool", Box::new(|t, v| t.avg_pool(v[0])), vec![img(r)]),
        (
            "linear",
            Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            vec![signed(r, &[2, 5]), signed(r, &[3, 5]), signed(r, &[3])],
        ),
        (
            "reshape",
            Box::new(|t, v| t.reshape(v[0], &[6, 16])),
            vec![img(r)],
        ),
        (
            "concat",
            Box::new(|t, v| t.concat(&[v[0], v[1]])),
            vec![img(r), signed(r, &[2, 2, 4, 4])],
        ),
        (
            "slice_channels",
            Box::new(|t, v| t.slice_channels(v[0], 1, 2)),
            vec![img(r)],
        ),
        (
            "window_partition",
            Box::new(|t, v| t.window_partition(v[0], 2)),
            vec![img(r)],
        ),
        (
            "window_merge",
            Box::new(|t, v| t.window_merge(v[0], 2, 4, 4)),
            vec![signed(r, &[8, 3, 2, 2])],
        ),
        (
            "window_compose",
            Box::new(|t, v| t.window_compose(v[0], v[1], v[2])),
            vec![
                signed(r, &[1, 2, 2, 3]),
                signed(r, &[1, 2, 2, 3]),
                signed(r, &[1, 3, 2, 3]),
            ],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            let report = grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    if t.shape(y).iter().product::<usize>() == 1 && t.shape(y).len() <= 1 {
                        Ok(y)
                    } else {
                        probe(t, y)
                    }
                },
                &inputs,
                PRIMITIVE_TOL,
            )?;
            Ok((name, report))
        })
        .collect()
}
