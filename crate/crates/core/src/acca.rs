//! Coarse adjustment: per-pixel affine maps from two W-CCA branches,
//! followed by a global colour matrix and gamma.
//!
//! ```text
//! I_local = max(A_l ⊙ I + B_l, 0)
//! I_l     = max(A_g · I_local, ε)^B_g
//! ```
//!
//! Every head starts at zero, so a freshly initialised model is the
//! identity on non-negative images.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{AxisWeights, ConvSpec, PadMode, Padding, Real, Tape, Tensor, Var};
use crate::wcca::{Wcca, WccaConfig};
use crate::weights::{Bound, WeightStore};

/// Lower clamp applied before the gamma exponent.
pub const POW_EPS: f64 = 1e-4;
pub const GAMMA_MIN: f64 = 0.5;
pub const GAMMA_MAX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccaConfig {
    pub wcca: WccaConfig,
    /// Side of the square thumbnail seen by the global encoder.
    pub global_size: usize,
    /// Output widths of the three stride-2 encoder convs.
    pub global_widths: [usize; 3],
    /// One gamma per colour channel instead of a single scalar.
    pub per_channel_gamma: bool,
}

impl Default for AccaConfig {
    fn default() -> Self {
        Self {
            wcca: WccaConfig::default(),
            global_size: 32,
            global_widths: [16, 16, 32],
            per_channel_gamma: false,
        }
    }
}

impl AccaConfig {
    pub fn validate(&self) -> Result<()> {
        self.wcca.validate()?;
        if self.global_size < 8 || self.global_widths.contains(&0) {
            return Err(Error::config(
                "global encoder needs a thumbnail of at least 8 and positive widths",
            ));
        }
        Ok(())
    }
}

/// Materialised adjustment parameters.
#[derive(Clone, Debug)]
pub struct AccaParams<T> {
    /// `N×3×H×W` scale map.
    pub a_l: Tensor<T>,
    /// `N×3×H×W` offset map.
    pub b_l: Tensor<T>,
    /// `N×3×3` colour matrices.
    pub a_g: Tensor<T>,
    /// `N×1` (or `N×3`) gammas.
    pub b_g: Tensor<T>,
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AccaTrace {
    pub a_l: Var,
    pub b_l: Var,
    pub local: Var,
    pub a_g: Var,
    pub b_g: Var,
    pub out: Var,
}

impl AccaTrace {
    pub fn params<T: Real>(&self, tape: &Tape<T>) -> AccaParams<T> {
        AccaParams {
            a_l: tape.value(self.a_l).clone(),
            b_l: tape.value(self.b_l).clone(),
            a_g: tape.value(self.a_g).clone(),
            b_g: tape.value(self.b_g).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Acca {
    pub cfg: AccaConfig,
    scale: Wcca,
    offset: Wcca,
}

impl Acca {
    pub fn new(cfg: AccaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            scale: Wcca::new(cfg.wcca, "acca.wcca_a")?,
            offset: Wcca::new(cfg.wcca, "acca.wcca_b")?,
            cfg,
        })
    }

    fn gamma_outputs(&self) -> usize {
        if self.cfg.per_channel_gamma {
            3
        } else {
            1
        }
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> WeightStore<T> {
        let c = self.cfg.wcca.channels;
        let mut s = WeightStore::new();
        nn::init_conv(&mut s, "acca.stem", c, 3, 3, rng);
        self.scale.init(&mut s, rng);
        self.offset.init(&mut s, rng);
        nn::zero_conv(&mut s, "acca.head_a", 3, c, 1);
        nn::zero_conv(&mut s, "acca.head_b", 3, c, 1);
        let [w1, w2, w3] = self.cfg.global_widths;
        for (name, out, inp) in [
            ("acca.global.conv1", w1, 3),
            ("acca.global.conv2", w2, w1),
            ("acca.global.conv3", w3, w2),
        ] {
            nn::init_conv(&mut s, name, out, inp, 3, rng);
        }
        nn::init_linear(&mut s, "acca.global.matrix", 9, w3, 0.0, rng);
        nn::init_linear(
            &mut s,
            "acca.global.gamma",
            self.gamma_outputs(),
            w3,
            0.0,
            rng,
        );
        s
    }

    /// `(A_l, B_l)` for an `N×3×H×W` image.
    pub fn local_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
    ) -> Result<(Var, Var)> {
        let stem = nn::conv(
            tape,
            p,
            "acca.stem",
            image,
            ConvSpec::same(PadMode::Reflect, 3),
        )?;
        let feat = tape.relu(stem)?;
        let fa = self.scale.forward(tape, p, feat)?;
        let fb = self.offset.forward(tape, p, feat)?;
        let ha = nn::conv(
            tape,
            p,
            "acca.head_a",
            fa,
            ConvSpec::new(1, Padding::none(), 1),
        )?;
        let ha = tape.tanh(ha)?;
        let a_l = tape.add_scalar(ha, T::one())?;
        let b_l = nn::conv(
            tape,
            p,
            "acca.head_b",
            fb,
            ConvSpec::new(1, Padding::none(), 1),
        )?;
        Ok((a_l, b_l))
    }

    /// `(A_g, B_g)` from a thumbnail of the locally adjusted image.
    pub fn global_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        local: Var,
    ) -> Result<(Var, Var)> {
        let (n, _, h, w) = tape.value(local).dims4()?;
        let g = self.cfg.global_size;
        let mut x = tape.resample(
            local,
            Arc::new(AxisWeights::area(h, g)),
            Arc::new(AxisWeights::area(w, g)),
        )?;
        for name in [
            "acca.global.conv1",
            "acca.global.conv2",
            "acca.global.conv3",
        ] {
            x = nn::conv(
                tape,
                p,
                name,
                x,
                ConvSpec::new(2, Padding::uniform(PadMode::Zero, 1), 1),
            )?;
            x = tape.relu(x)?;
        }
        let pooled = tape.avg_pool(x)?;
        let delta_a = nn::linear(tape, p, "acca.global.matrix", pooled)?;
        let delta_a = tape.tanh(delta_a)?;
        let delta_a = tape.reshape(delta_a, &[n, 3, 3])?;
        let eye = tape.constant(identity3().reshape(&[1, 3, 3])?)?;
        let a_g = tape.add(delta_a, eye)?;
        let delta_b = nn::linear(tape, p, "acca.global.gamma", pooled)?;
        let b_g = tape.add_scalar(delta_b, T::one())?;
        let b_g = tape.clamp(
            b_g,
            Some(T::from_f64(GAMMA_MIN)),
            Some(T::from_f64(GAMMA_MAX)),
        )?;
        Ok((a_g, b_g))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<AccaTrace> {
        let (_, c, _, _) = tape.value(image).dims4()?;
        if c != 3 {
            return Err(Error::dim(format!(
                "ACCA expects RGB input, got {c} channels"
            )));
        }
        let (a_l, b_l) = self.local_branch(tape, p, image)?;
        let local = apply_local(tape, image, a_l, b_l)?;
        let (a_g, b_g) = self.global_branch(tape, p, local)?;
        let out = apply_global(tape, local, a_g, b_g)?;
        Ok(AccaTrace {
            a_l,
            b_l,
            local,
            a_g,
            b_g,
            out,
        })
    }

    /// Runs the model without recording gradients for the weights.
    pub fn infer(&self, store: &WeightStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false)?;
        let x = tape.constant(image.clone())?;
        let trace = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(trace.out).clone())
    }

    /// Scalars in the ACCA part of `store`.
    pub fn param_count<T: Real>(store: &WeightStore<T>) -> usize {
        store
            .iter()
            .filter(|(k, _)| k.starts_with("acca."))
            .map(|(_, t)| t.len())
            .sum()
    }
}

fn identity3<T: Real>() -> Tensor<T> {
    Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { T::one() } else { T::zero() })
}

/// `max(A_l ⊙ I + B_l, 0)`.
pub fn apply_local<T: Real>(tape: &mut Tape<T>, image: Var, a_l: Var, b_l: Var) -> Result<Var> {
    let scaled = tape.mul(a_l, image)?;
    let shifted = tape.add(scaled, b_l)?;
    tape.clamp(shifted, Some(T::zero()), None)
}

/// `max(A_g · x, ε)^B_g`, colour matrix first.
pub fn apply_global<T: Real>(tape: &mut Tape<T>, local: Var, a_g: Var, b_g: Var) -> Result<Var> {
    let mixed = tape.matmul3(a_g, local)?;
    tape.pow_gamma(mixed, b_g, T::from_f64(POW_EPS))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.05..1.0))
    }

    fn small_cfg() -> AccaConfig {
        AccaConfig {
            wcca: WccaConfig {
                channels: 4,
                window: 4,
                sigmoid_gate: false,
            },
            global_size: 8,
            global_widths: [4, 4, 4],
            per_channel_gamma: false,
        }
    }

    /// Randomises every parameter so no branch sits at a trivial point.
    fn perturbed(model: &Acca, seed: u64, std: f64) -> WeightStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = model.init::<f64, _>(&mut rng);
        for (_, t) in s.iter_mut() {
            let noise: Tensor<f64> = nn::normal(t.shape(), std, &mut rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(a, b)| *a += b);
        }
        s
    }

    #[test]
    fn default_param_count_in_budget() {
        let model = Acca::new(AccaConfig::default()).unwrap();
        let s = model.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let n = Acca::param_count(&s);
        assert!((60_000..=120_000).contains(&n), "{n}");
        assert_eq!(n, s.param_count());
    }

    #[test]
    fn single_conv_count() {
        let mut s = WeightStore::<f32>::new();
        nn::init_conv(&mut s, "acca.x", 8, 3, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(Acca::param_count(&s), 224);
    }

    #[test]
    fn fresh_model_is_identity() {
        let model = Acca::new(AccaConfig::default()).unwrap();
        let s = model.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(1));
        let x = image(&[2, 3, 64, 48], 2);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let t = model.forward(&mut tape, &p, xv).unwrap();
        let params = t.params(&tape);
        assert!(params.a_l.data().iter().all(|&v| v == 1.0));
        assert!(params.b_l.data().iter().all(|&v| v == 0.0));
        assert_eq!(params.a_g.shape(), &[2, 3, 3]);
        assert_eq!(params.a_g.data()[..9], *identity3::<f64>().data());
        assert!(params.b_g.data().iter().all(|&v| v == 1.0));
        assert!(tape.value(t.out).max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn local_and_global_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.2)).unwrap();
        let a = tape.constant(Tensor::full(&[1, 3, 2, 2], 2.0)).unwrap();
        let b = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.1)).unwrap();
        let y = apply_local(&mut tape, i, a, b).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));

        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.25)).unwrap();
        let eye = tape.constant(identity3()).unwrap();
        let half = tape.constant(Tensor::full(&[1, 1], 0.5)).unwrap();
        let y = apply_global(&mut tape, x, eye, half).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));
        let one = tape.constant(Tensor::full(&[1, 1], 1.0)).unwrap();
        let y = apply_global(&mut tape, x, eye, one).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn apply_local_matches_elementwise_oracle() {
        let (i, a, b) = (
            image(&[1, 3, 4, 4], 3),
            image(&[1, 3, 4, 4], 4),
            image(&[1, 3, 4, 4], 5),
        );
        let b = b.map(|v| v - 0.8);
        let mut tape = Tape::new();
        let (iv, av, bv) = (
            tape.constant(i.clone()).unwrap(),
            tape.constant(a.clone()).unwrap(),
            tape.constant(b.clone()).unwrap(),
        );
        let y = apply_local(&mut tape, iv, av, bv).unwrap();
        for k in 0..i.len() {
            let want = (a.data()[k] * i.data()[k] + b.data()[k]).max(0.0);
            assert_eq!(tape.value(y).data()[k], want);
        }
    }

    #[test]
    fn apply_global_matches_operator_composition() {
        let x = image(&[1, 3, 3, 3], 6);
        let m: Tensor<f64> = Tensor::from_fn(&[3, 3], |i| {
            [1.1, 0.1, -0.05, 0.0, 0.9, 0.2, 0.05, -0.1, 1.0][i]
        });
        let g = 0.7;
        let mut tape = Tape::new();
        let (xv, mv) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(m.clone()).unwrap(),
        );
        let gv = tape.constant(Tensor::full(&[1, 1], g)).unwrap();
        let y = apply_global(&mut tape, xv, mv, gv).unwrap();
        for p in 0..9 {
            for r in 0..3 {
                let lin: f64 = (0..3)
                    .map(|c| m.data()[r * 3 + c] * x.data()[c * 9 + p])
                    .sum();
                let want = lin.max(POW_EPS).powf(g);
                assert!((tape.value(y).data()[r * 9 + p] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn global_outputs_respect_bounds() {
        let model = Acca::new(small_cfg()).unwrap();
        let s = perturbed(&model, 7, 3.0);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let x = tape.constant(image(&[2, 3, 16, 16], 8)).unwrap();
        let (a_g, b_g) = model.global_branch(&mut tape, &p, x).unwrap();
        let eye = identity3::<f64>();
        for (k, &v) in tape.value(a_g).data().iter().enumerate() {
            assert!((v - eye.data()[k % 9]).abs() <= 1.0);
        }
        assert!(tape
            .value(b_g)
            .data()
            .iter()
            .all(|&v| (GAMMA_MIN..=GAMMA_MAX).contains(&v)));
    }

    #[test]
    fn per_channel_gamma_shape() {
        let model = Acca::new(AccaConfig {
            per_channel_gamma: true,
            ..small_cfg()
        })
        .unwrap();
        let s = perturbed(&model, 9, 0.05);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let x = tape.constant(image(&[1, 3, 8, 8], 10)).unwrap();
        let t = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(t.b_g), &[1, 3]);
        assert_eq!(tape.shape(t.out), &[1, 3, 8, 8]);
    }

    #[test]
    fn monotone_in_each_pixel() {
        let mut tape = Tape::<f64>::new();
        let lo = image(&[1, 3, 4, 4], 11);
        let hi = lo.map(|v| v + 0.01);
        let a = tape.constant(image(&[1, 3, 4, 4], 12)).unwrap();
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], -0.1)).unwrap();
        let eye = tape.constant(identity3()).unwrap();
        let g = tape.constant(Tensor::full(&[1, 1], 0.6)).unwrap();
        let mut outs = Vec::new();
        for x in [lo, hi] {
            let xv = tape.constant(x).unwrap();
            let l = apply_local(&mut tape, xv, a, b).unwrap();
            let y = apply_global(&mut tape, l, eye, g).unwrap();
            outs.push((tape.value(l).clone(), tape.value(y).clone()));
        }
        for k in 0..48 {
            let (l0, l1) = (outs[0].0.data()[k], outs[1].0.data()[k]);
            if l0 > 0.0 {
                assert!(l1 > l0);
                assert!(outs[1].1.data()[k] > outs[0].1.data()[k]);
            }
        }
    }

    #[test]
    fn gradients_through_both_branches() {
        let model = Acca::new(small_cfg()).unwrap();
        let s = perturbed(&model, 13, 0.05);
        let names: Vec<String> = s.names().map(str::to_owned).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
        let x = image(&[1, 3, 8, 8], 14).map(|v| 0.3 + 0.5 * v);
        let r = grad_check(
            |tape, vars| {
                let p = names
                    .iter()
                    .zip(vars)
                    .fold(Bound::default(), |acc, (n, v)| acc.with(n, *v));
                let xv = tape.constant(x.clone())?;
                let t = model.forward(tape, &p, xv)?;
                let sq = tape.mul(t.out, t.out)?;
                tape.mean(sq)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn rejects_non_rgb() {
        let model = Acca::new(small_cfg()).unwrap();
        let s = model.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 4, 8, 8])).unwrap();
        assert!(model.forward(&mut tape, &p, x).is_err());
    }
}
