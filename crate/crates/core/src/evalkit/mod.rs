//! Synthetic data, quality metrics and ablation experiments.

pub mod ablation;
pub mod metrics;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use metrics::{psnr, ssim, PSNR_CAP};
pub use synth::{clean_image, synth_pair, Pair, PairSet, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub rows: Vec<EvalRow>,
    /// Hash of the evaluated pairs.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.6}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean,{:.4},{:.6}", self.psnr_mean, self.ssim_mean);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `enhance(low)` against `gt` for every pair; images are processed
/// in parallel, rows keep dataset order.
pub fn evaluate<F>(pairs: &PairSet, enhance: F) -> Result<EvalReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let rows = pairs
        .pairs
        .par_iter()
        .map(|p| {
            let out = enhance(&p.low)?;
            Ok(EvalRow {
                name: p.name.clone(),
                psnr: psnr(&out, &p.gt, 1.0)?,
                ssim: ssim(&out, &p.gt, 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalReport {
        psnr_mean: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim_mean: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        fingerprint: pairs.fingerprint(),
    })
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
