//! Training objectives.
//!
//! All L1 terms use a mean over the elements of each band; band terms are
//! summed over bands.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pyramid::Bands;
use crate::tensor::{Real, Tape, Var};

pub const DEFAULT_ALPHA: f64 = 1.0;

/// Values of one evaluation of the band objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_i: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub per_band: Vec<f64>,
}

/// Mean absolute difference of two same-shaped tensors.
pub fn l1<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "L1 of {:?} and {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `Σ_k mean|m^k_d − m^k_gt|`; also returns the per-band terms.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, md: &Bands, mgt: &Bands) -> Result<(Var, Vec<Var>)> {
    if md.levels() != mgt.levels() {
        return Err(Error::dim(format!(
            "{} predicted bands vs {} target bands",
            md.levels(),
            mgt.levels()
        )));
    }
    let per_band = md
        .vars
        .iter()
        .zip(&mgt.vars)
        .map(|(&d, &g)| l1(tape, d, g))
        .collect::<Result<Vec<_>>>()?;
    let mut total = per_band[0];
    for &b in &per_band[1..] {
        total = tape.add(total, b)?;
    }
    Ok((total, per_band))
}

/// `mean|m^K_d − m^K_l|`: only the coarsest band, against the coarse result.
pub fn consistency_loss<T: Real>(tape: &mut Tape<T>, md: &Bands, ml: &Bands) -> Result<Var> {
    l1(tape, md.coarsest(), ml.coarsest())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!(
            "alpha must be a finite non-negative number, got {alpha}"
        )));
    }
    Ok(())
}

/// `L_r + α·L_i` on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_r: Var, l_i: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = tape.scale(l_i, T::from_f64(alpha))?;
    tape.add(l_r, weighted)
}

/// Scalar form of [`total_loss`].
pub fn total(l_r: f64, l_i: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(l_r + alpha * l_i)
}

/// Full band objective; returns the differentiable total and its report.
pub fn band_objective<T: Real>(
    tape: &mut Tape<T>,
    md: &Bands,
    mgt: &Bands,
    ml: &Bands,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    let (l_r, per_band) = recon_loss(tape, md, mgt)?;
    let l_i = consistency_loss(tape, md, ml)?;
    let l_total = total_loss(tape, l_r, l_i, alpha)?;
    let v = |tape: &Tape<T>, x: Var| tape.value(x).item().as_f64();
    let report = LossReport {
        l_r: v(tape, l_r),
        l_i: v(tape, l_i),
        l_total: v(tape, l_total),
        alpha,
        per_band: per_band.iter().map(|&b| v(tape, b)).collect(),
    };
    Ok((l_total, report))
}

/// Coarse-stage objective: L1 between the adjusted image and the target.
pub fn acca_loss<T: Real>(tape: &mut Tape<T>, il: Var, gt: Var) -> Result<Var> {
    l1(tape, il, gt)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pyramid::{CodecMode, PyramidStack};
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn stack(seed: u64) -> PyramidStack<f64> {
        PyramidStack::decompose(&random(&[1, 3, 16, 16], seed), 3, CodecMode::Exact).unwrap()
    }

    fn eval(
        md: &PyramidStack<f64>,
        mgt: &PyramidStack<f64>,
        ml: &PyramidStack<f64>,
        alpha: f64,
    ) -> LossReport {
        let mut tape = Tape::new();
        let (a, b, c) = (
            md.bind(&mut tape).unwrap(),
            mgt.bind(&mut tape).unwrap(),
            ml.bind(&mut tape).unwrap(),
        );
        band_objective(&mut tape, &a, &b, &c, alpha).unwrap().1
    }

    #[test]
    fn hand_l1_on_one_band() {
        let mut tape = Tape::<f64>::new();
        let d = tape
            .constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let g = tape.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let (l, _) = recon_loss(
            &mut tape,
            &Bands {
                vars: vec![d],
                mode: CodecMode::Exact,
            },
            &Bands {
                vars: vec![g],
                mode: CodecMode::Exact,
            },
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn zero_iff_equal_and_symmetric() {
        let (a, b) = (stack(1), stack(2));
        let r = eval(&a, &a, &a, 1.0);
        assert_eq!((r.l_r, r.l_i, r.l_total), (0.0, 0.0, 0.0));
        let ab = eval(&a, &b, &b, 1.0);
        let ba = eval(&b, &a, &a, 1.0);
        assert_eq!(ab.l_r, ba.l_r);
        assert!(ab.l_r > 0.0);
        assert_eq!(ab.per_band.len(), 3);
        assert!((ab.per_band.iter().sum::<f64>() - ab.l_r).abs() < 1e-15);
    }

    #[test]
    fn consistency_sees_only_coarsest_band() {
        let (md, ml) = (stack(3), stack(3));
        let mut bands = ml.bands().to_vec();
        bands[2] = bands[2].map(|v| v + 0.2);
        let shifted = PyramidStack::new(bands, CodecMode::Exact).unwrap();
        let r = eval(&md, &md, &shifted, 1.0);
        assert!((r.l_i - 0.2).abs() < 1e-12);

        let mut high = md.bands().to_vec();
        high[0] = high[0].map(|v| v * 3.0 - 1.0);
        high[1] = high[1].map(|v| v + 0.7);
        let noisy = PyramidStack::new(high, CodecMode::Exact).unwrap();
        assert_eq!(
            eval(&noisy, &md, &ml, 1.0).l_i.to_bits(),
            eval(&md, &md, &ml, 1.0).l_i.to_bits()
        );
    }

    #[test]
    fn consistency_gradient_is_signed_inverse_count() {
        let (md, ml) = (stack(4), stack(5));
        let mut tape = Tape::new();
        let coarse = tape.param(md.bands()[2].clone()).unwrap();
        let mut vars = md.bind(&mut tape).unwrap().vars;
        vars[2] = coarse;
        let mdb = Bands {
            vars,
            mode: CodecMode::Exact,
        };
        let mlb = ml.bind(&mut tape).unwrap();
        let l = consistency_loss(&mut tape, &mdb, &mlb).unwrap();
        tape.backward(l).unwrap();
        let n = md.bands()[2].len() as f64;
        let g = tape.grad(coarse).unwrap();
        for (k, &v) in g.data().iter().enumerate() {
            let sign = (md.bands()[2].data()[k] - ml.bands()[2].data()[k]).signum();
            assert_eq!(v, sign / n);
        }
    }

    #[test]
    fn total_is_affine_in_alpha() {
        let (a, b, c) = (stack(6), stack(7), stack(8));
        let base = eval(&a, &b, &c, 0.0);
        for alpha in [0.0, 0.5, 1.0, 2.0] {
            let r = eval(&a, &b, &c, alpha);
            assert!((r.l_total - (base.l_r + alpha * base.l_i)).abs() < 1e-7);
        }
        assert_eq!(total(0.3, 0.2, 1.0).unwrap(), 0.5);
        assert_eq!(total(0.3, 0.2, 0.0).unwrap(), 0.3);
        assert!(matches!(total(0.3, 0.2, -1.0), Err(Error::Config(_))));
        assert_eq!(DEFAULT_ALPHA, 1.0);
    }

    #[test]
    fn acca_loss_cases_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.2)).unwrap();
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.5)).unwrap();
        let l = acca_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-15);
        let l0 = acca_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);

        let (x, y) = (random(&[1, 3, 4, 4], 9), random(&[1, 3, 4, 4], 10));
        let r = grad_check(|t, v| acca_loss(t, v[0], v[1]), &[x, y], 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
