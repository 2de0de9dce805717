//! Paired-seed ablation suites: low-frequency consistency on/off against a
//! single-stage baseline, pyramid depth, consistency weight, and frozen
//! versus joint training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{evaluate, median, PairSet};
use crate::error::{Error, Result};
use crate::ldrm::UnifiedBaseline;
use crate::tensor::Tape;
use crate::training::{self, TrainConfig};
use crate::weights::WeightStore;

/// Minimum median PSNR gain of the full model in the consistency suite.
pub const LI_MARGIN_DB: f64 = 0.3;
/// Allowed shortfall of the default weight against the best weight.
pub const ALPHA_TOLERANCE_DB: f64 = 0.5;
pub const K_SWEEP: [usize; 4] = [3, 4, 5, 6];
pub const ALPHA_SWEEP: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Li,
    K,
    Alpha,
    Freeze,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Li, Suite::K, Suite::Alpha, Suite::Freeze];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Li => "li",
            Suite::K => "k",
            Suite::Alpha => "alpha",
            Suite::Freeze => "freeze",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown suite `{s}` (expected li, k, alpha or freeze)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Reference backbone trained directly on the image.
    Unified,
    /// Coarse model, then fine model with the coarse model frozen.
    Frozen,
    /// Both models trained jointly from the phase-1 coarse weights.
    Joint,
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub kind: Kind,
    pub cfg: TrainConfig,
}

/// Configurations compared by `suite`, derived from `base`.
pub fn variants(suite: Suite, base: &TrainConfig) -> Vec<Variant> {
    let v = |label: String, kind, cfg| Variant { label, kind, cfg };
    match suite {
        Suite::Li => vec![
            v("unified".into(), Kind::Unified, base.clone()),
            v(
                "without_li".into(),
                Kind::Frozen,
                TrainConfig {
                    alpha: 0.0,
                    ..base.clone()
                },
            ),
            v("with_li".into(), Kind::Frozen, base.clone()),
        ],
        Suite::K => K_SWEEP
            .iter()
            .map(|&k| {
                let crop = base
                    .crop
                    .next_multiple_of(training::conforming_unit(k, base.acca.wcca.window));
                v(
                    format!("k{k}"),
                    Kind::Frozen,
                    TrainConfig {
                        levels: k,
                        crop,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Suite::Alpha => ALPHA_SWEEP
            .iter()
            .map(|&a| {
                v(
                    format!("alpha{a}"),
                    Kind::Frozen,
                    TrainConfig {
                        alpha: a,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Suite::Freeze => vec![
            v("frozen".into(), Kind::Frozen, base.clone()),
            v(
                "end_to_end".into(),
                Kind::Joint,
                TrainConfig {
                    freeze_acca: false,
                    ..base.clone()
                },
            ),
        ],
    }
}

/// Trained weights for one variant and seed.
#[derive(Clone, Debug)]
pub enum Trained {
    Unified(WeightStore<f32>),
    Staged {
        acca: WeightStore<f32>,
        ldrm: WeightStore<f32>,
    },
}

/// Trains every variant of `suite` for every seed. Within a seed all
/// staged variants share one phase-1 run, so they differ only in what the
/// suite varies.
pub fn train_suite(
    suite: Suite,
    base: &TrainConfig,
    train: &PairSet,
    seeds: &[u64],
    mut log: impl FnMut(&str),
) -> Result<BTreeMap<String, Vec<Trained>>> {
    let vars = variants(suite, base);
    let mut out: BTreeMap<String, Vec<Trained>> = BTreeMap::new();
    for &seed in seeds {
        let coarse = if vars.iter().any(|v| v.kind != Kind::Unified) {
            log(&format!("seed {seed}: coarse phase"));
            Some(
                training::train_acca(
                    train,
                    &TrainConfig {
                        seed,
                        ..base.clone()
                    },
                )?
                .weights,
            )
        } else {
            None
        };
        for var in &vars {
            log(&format!("seed {seed}: {}", var.label));
            let cfg = TrainConfig {
                seed,
                ..var.cfg.clone()
            };
            let trained = match var.kind {
                Kind::Unified => Trained::Unified(training::train_unified(train, &cfg)?.weights),
                Kind::Frozen => {
                    let r = training::train_ldrm(
                        train,
                        coarse.as_ref(),
                        &TrainConfig {
                            freeze_acca: true,
                            ..cfg
                        },
                    )?;
                    Trained::Staged {
                        acca: r.acca_weights,
                        ldrm: r.ldrm_weights,
                    }
                }
                Kind::Joint => {
                    let r = training::train_end_to_end(train, coarse.as_ref(), &cfg)?;
                    Trained::Staged {
                        acca: r.acca_weights,
                        ldrm: r.ldrm_weights,
                    }
                }
            };
            out.entry(var.label.clone()).or_default().push(trained);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_median: f64,
    pub ssim_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<Check>,
    pub fingerprint: String,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config");
        for seed in &self.seeds {
            let _ = write!(s, ",psnr_seed{seed}");
        }
        s.push_str(",psnr_median,ssim_median\n");
        for r in &self.rows {
            s.push_str(&r.label);
            for p in &r.psnr {
                let _ = write!(s, ",{p:.4}");
            }
            let _ = writeln!(s, ",{:.4},{:.6}", r.psnr_median, r.ssim_median);
        }
        s
    }

    /// Writes `<suite>.csv` and `<suite>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}.csv", self.suite.name()));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{}.json", self.suite.name()));
        let text = serde_json::to_string_pretty(self).expect("table serialises");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

fn enhance_with(cfg: &TrainConfig, trained: &Trained, test: &PairSet) -> Result<super::EvalReport> {
    match trained {
        Trained::Unified(w) => {
            let net = UnifiedBaseline::new(cfg.ldrm.width, cfg.ldrm.blocks);
            evaluate(test, |x| {
                let mut tape = Tape::new();
                let p = w.bind(&mut tape, false)?;
                let xv = tape.constant(x.clone())?;
                let y = net.forward(&mut tape, &p, xv)?;
                Ok(tape.value(y).map(|v| v.clamp(0.0, 1.0)))
            })
        }
        Trained::Staged { acca, ldrm } => {
            let pipe = training::pipeline(cfg, acca.clone(), ldrm.clone())?;
            evaluate(test, |x| Ok(pipe.run(x)?.0))
        }
    }
}

/// Scores trained weight sets on `test`; one row per configuration of the
/// suite, in suite order.
pub fn ablation_report(
    suite: Suite,
    base: &TrainConfig,
    test: &PairSet,
    seeds: &[u64],
    trained: &BTreeMap<String, Vec<Trained>>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for var in variants(suite, base) {
        let sets = trained
            .get(&var.label)
            .filter(|s| s.len() == seeds.len())
            .ok_or_else(|| {
                Error::config(format!(
                    "missing trained weights for `{}` ({} seeds expected)",
                    var.label,
                    seeds.len()
                ))
            })?;
        let mut psnr = Vec::new();
        let mut ssim = Vec::new();
        for t in sets {
            let r = enhance_with(&var.cfg, t, test)?;
            psnr.push(r.psnr_mean);
            ssim.push(r.ssim_mean);
        }
        rows.push(AblationRow {
            label: var.label,
            psnr_median: median(&psnr),
            ssim_median: median(&ssim),
            psnr,
            ssim,
        });
    }
    let mut table = AblationTable {
        suite,
        seeds: seeds.to_vec(),
        rows,
        checks: Vec::new(),
        fingerprint: test.fingerprint(),
    };
    table.checks = directional_checks(&table);
    Ok(table)
}

fn gap_check(t: &AblationTable, a: &str, b: &str, margin: f64) -> Check {
    let (pa, pb) = (
        t.row(a).map_or(f64::NAN, |r| r.psnr_median),
        t.row(b).map_or(f64::NAN, |r| r.psnr_median),
    );
    Check {
        claim: format!("{a} >= {b} + {margin} dB"),
        holds: pa >= pb + margin,
        detail: format!("{pa:.3} vs {pb:.3} dB (gap {:+.3})", pa - pb),
    }
}

/// Directional claims each suite is expected to show.
pub fn directional_checks(t: &AblationTable) -> Vec<Check> {
    match t.suite {
        Suite::Li => vec![
            gap_check(t, "with_li", "without_li", LI_MARGIN_DB),
            gap_check(t, "with_li", "unified", LI_MARGIN_DB),
        ],
        Suite::Freeze => vec![gap_check(t, "frozen", "end_to_end", 0.0)],
        Suite::Alpha => {
            let best = t
                .rows
                .iter()
                .map(|r| r.psnr_median)
                .fold(f64::NEG_INFINITY, f64::max);
            let default = t.row("alpha1").map_or(f64::NAN, |r| r.psnr_median);
            vec![Check {
                claim: format!("alpha1 within {ALPHA_TOLERANCE_DB} dB of the best weight"),
                holds: default >= best - ALPHA_TOLERANCE_DB,
                detail: format!("{default:.3} vs best {best:.3} dB"),
            }]
        }
        Suite::K => Vec::new(),
    }
}
