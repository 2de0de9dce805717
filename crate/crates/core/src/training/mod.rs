//! Two-phase optimisation: the coarse model on image L1, then the fine
//! model on the band objective with the coarse model frozen. An
//! end-to-end mode and a single-stage baseline exist for comparison.
//!
//! Every sample of a batch gets its own tape. Per-sample gradients are
//! summed in batch order, so the result does not depend on how many worker
//! threads computed them.

pub mod data;
pub mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acca::{Acca, AccaConfig};
use crate::error::{Error, Result};
use crate::evalkit::PairSet;
use crate::ldrm::{
    self, Backbone, BackboneRegistry, BackboneSpec, LdrmConfig, Pipeline, UnifiedBaseline,
};
use crate::losses;
use crate::pyramid::{self, CodecMode};
use crate::tensor::{Tape, Tensor};
use crate::weights::WeightStore;

pub use data::{augment_pair, Orientation};
pub use optim::{clip_global_norm, cosine_lr, Adam};

/// Note attached to every coarse-model training report.
pub const PERCEPTUAL_NOTE: &str =
    "coarse model trained with L1 only; the perceptual loss term is not implemented (no pretrained feature network)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Acca,
    Ldrm,
    #[serde(rename = "e2e")]
    EndToEnd,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acca" => Ok(Self::Acca),
            "ldrm" => Ok(Self::Ldrm),
            "e2e" | "end-to-end" => Ok(Self::EndToEnd),
            _ => Err(Error::usage(format!(
                "unknown phase `{s}` (expected acca, ldrm or e2e)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr0: f64,
    pub acca_epochs: usize,
    pub acca_batch: usize,
    pub ldrm_iters: usize,
    pub ldrm_batch: usize,
    pub alpha: f64,
    pub levels: usize,
    pub codec_mode: CodecMode,
    /// Side of the square training crops.
    pub crop: usize,
    pub clip_norm: f64,
    /// Weight of an extra image-domain L1 term in the fine phase; 0 keeps
    /// the band objective alone.
    pub image_loss_weight: f64,
    pub freeze_acca: bool,
    pub seed: u64,
    pub acca: AccaConfig,
    pub ldrm: LdrmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Acca,
            lr0: 5e-4,
            acca_epochs: 30,
            acca_batch: 4,
            ldrm_iters: 2000,
            ldrm_batch: 8,
            alpha: losses::DEFAULT_ALPHA,
            levels: pyramid::DEFAULT_LEVELS,
            codec_mode: CodecMode::Exact,
            crop: 64,
            clip_norm: 1.0,
            image_loss_weight: 0.0,
            freeze_acca: true,
            seed: 0,
            acca: AccaConfig::default(),
            ldrm: LdrmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0 must be positive"));
        }
        losses::check_alpha(self.alpha)?;
        if self.levels < 2 {
            return Err(Error::config("levels must be at least 2"));
        }
        if self.acca_batch == 0 || self.ldrm_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.image_loss_weight < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config(
                "image_loss_weight must be ≥ 0 and clip_norm > 0",
            ));
        }
        self.acca.validate()?;
        let unit = conforming_unit(self.levels, self.acca.wcca.window);
        if self.crop == 0 || !self.crop.is_multiple_of(unit) {
            return Err(Error::config(format!(
                "crop {} must be a multiple of {unit} (window and 2^(levels-1))",
                self.crop
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec::for_levels(self.levels, self.ldrm.width, self.ldrm.blocks)
    }
}

/// Smallest side length accepted by both the window split and the pyramid.
pub fn conforming_unit(levels: usize, window: usize) -> usize {
    let pyr = 1usize << (levels.saturating_sub(1));
    pyr / gcd(pyr, window) * window
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Losses of one optimiser step, averaged over the batch. In the coarse
/// phase and for the single-stage baseline, `l_r` holds the image L1 and
/// `l_i` is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub l_r: f64,
    pub l_i: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub notes: Vec<String>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_r,l_i,l_total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.8}", r.step, r.l_r, r.l_i, r.l_total);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over the first and last `n` steps.
    pub fn head_tail(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.rows.len().max(1));
        let mean = |rows: &[HistoryRow]| {
            rows.iter().map(|r| r.l_total).sum::<f64>() / rows.len().max(1) as f64
        };
        (
            mean(&self.rows[..n.min(self.rows.len())]),
            mean(&self.rows[self.rows.len().saturating_sub(n)..]),
        )
    }
}

/// Loss terms of one sample.
type Terms = [f64; 3];
type Sample = (Tensor<f32>, Tensor<f32>);

/// Shared optimisation loop over `steps` batches.
fn fit<B, F>(
    params: &mut WeightStore<f32>,
    cfg: &TrainConfig,
    steps: usize,
    mut next_batch: B,
    per_sample: F,
    history: &mut History,
) -> Result<()>
where
    B: FnMut(usize) -> Result<Vec<Sample>>,
    F: Fn(&WeightStore<f32>, &Sample) -> Result<(WeightStore<f32>, Terms)> + Sync,
{
    let mut adam = Adam::new(params);
    for step in 0..steps {
        let batch = next_batch(step)?;
        let snapshot = &*params;
        let results = batch
            .par_iter()
            .map(|s| per_sample(snapshot, s))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch.len() as f32;
        let mut grads = results[0].0.clone();
        for (g, _) in &results[1..] {
            grads.add_scaled(g, 1.0)?;
        }
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = cosine_lr(step, steps, cfg.lr0)?;
        adam.step(params, &grads, lr)?;
        let mean = |k: usize| results.iter().map(|(_, t)| t[k]).sum::<f64>() / results.len() as f64;
        history.rows.push(HistoryRow {
            step,
            lr,
            l_r: mean(0),
            l_i: mean(1),
            l_total: mean(2),
        });
    }
    Ok(())
}

fn phase_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ACCA_INIT: u64 = 1;
const STREAM_LDRM_INIT: u64 = 2;
const STREAM_ACCA_DATA: u64 = 3;
const STREAM_LDRM_DATA: u64 = 4;
const STREAM_UNIFIED: u64 = 5;

fn require_data(data: &PairSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    Ok(())
}

/// Batches of uniformly drawn, augmented pairs.
fn random_batches<'a>(
    data: &'a PairSet,
    batch: usize,
    crop: usize,
    mut rng: ChaCha8Rng,
) -> impl FnMut(usize) -> Result<Vec<Sample>> + 'a {
    move |_| {
        (0..batch)
            .map(|_| {
                let p = &data.pairs[rng.random_range(0..data.len())];
                augment_pair(&p.low, &p.gt, crop, &mut rng)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AccaRun {
    pub weights: WeightStore<f32>,
    pub history: History,
}

/// Phase 1: coarse model against the target image, shuffled epochs.
pub fn train_acca(data: &PairSet, cfg: &TrainConfig) -> Result<AccaRun> {
    cfg.validate()?;
    require_data(data)?;
    let model = Acca::new(cfg.acca.clone())?;
    let mut weights = model.init(&mut phase_rng(cfg.seed, STREAM_ACCA_INIT));
    let per_epoch = data.len().div_ceil(cfg.acca_batch);
    let steps = cfg.acca_epochs * per_epoch;
    let mut rng = phase_rng(cfg.seed, STREAM_ACCA_DATA);
    let mut order: Vec<usize> = Vec::new();
    let batches = |step: usize| -> Result<Vec<Sample>> {
        if step.is_multiple_of(per_epoch) {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let start = (step % per_epoch) * cfg.acca_batch;
        order[start..(start + cfg.acca_batch).min(order.len())]
            .iter()
            .map(|&i| augment_pair(&data.pairs[i].low, &data.pairs[i].gt, cfg.crop, &mut rng))
            .collect()
    };
    let per_sample = |w: &WeightStore<f32>, (low, gt): &Sample| {
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, true)?;
        let x = tape.constant(low.clone())?;
        let y = tape.constant(gt.clone())?;
        let t = model.forward(&mut tape, &p, x)?;
        let loss = losses::acca_loss(&mut tape, t.out, y)?;
        tape.backward(loss)?;
        let l = tape.value(loss).item() as f64;
        Ok((p.grads(&tape), [l, 0.0, l]))
    };
    let mut history = History {
        notes: vec![PERCEPTUAL_NOTE.to_owned()],
        ..History::default()
    };
    fit(&mut weights, cfg, steps, batches, per_sample, &mut history)?;
    Ok(AccaRun { weights, history })
}

#[derive(Clone, Debug)]
pub struct LdrmRun {
    pub acca_weights: WeightStore<f32>,
    pub ldrm_weights: WeightStore<f32>,
    pub history: History,
}

fn build_backbone(cfg: &TrainConfig) -> Result<Box<dyn Backbone<f32>>> {
    BackboneRegistry::<f32>::with_defaults().build(&cfg.ldrm.backbone, cfg.backbone_spec())
}

/// Terms and tape gradient of the band objective for one sample.
fn fine_sample(
    cfg: &TrainConfig,
    acca: &Acca,
    net: &dyn Backbone<f32>,
    acca_w: &WeightStore<f32>,
    acca_trainable: bool,
    ldrm_w: &WeightStore<f32>,
    (low, gt): &Sample,
) -> Result<(WeightStore<f32>, Terms)> {
    let mut tape = Tape::new();
    let pa = acca_w.bind(&mut tape, acca_trainable)?;
    let pd = ldrm_w.bind(&mut tape, true)?;
    let x = tape.constant(low.clone())?;
    let y = tape.constant(gt.clone())?;
    let t = ldrm::enhance(
        &mut tape,
        acca,
        &pa,
        net,
        &pd,
        x,
        cfg.levels,
        cfg.codec_mode,
    )?;
    let mgt = pyramid::decompose(&mut tape, y, cfg.levels, cfg.codec_mode)?;
    let (mut loss, report) = losses::band_objective(&mut tape, &t.md, &mgt, &t.ml, cfg.alpha)?;
    if cfg.image_loss_weight > 0.0 {
        let img = losses::l1(&mut tape, t.out, y)?;
        let img = tape.scale(img, cfg.image_loss_weight as f32)?;
        loss = tape.add(loss, img)?;
    }
    tape.backward(loss)?;
    let mut grads = pd.grads(&tape);
    if acca_trainable {
        grads = pa.grads(&tape).merged(&grads);
    }
    Ok((
        grads,
        [report.l_r, report.l_i, tape.value(loss).item() as f64],
    ))
}

/// Phase 2: fine model on the band objective; the coarse model is bound
/// as constants and checked unchanged afterwards.
pub fn train_ldrm(
    data: &PairSet,
    acca_weights: Option<&WeightStore<f32>>,
    cfg: &TrainConfig,
) -> Result<LdrmRun> {
    cfg.validate()?;
    require_data(data)?;
    let acca_weights = acca_weights
        .ok_or_else(|| Error::config("fine phase needs trained coarse-model weights"))?;
    if !cfg.freeze_acca {
        return train_end_to_end(data, Some(acca_weights), cfg);
    }
    let acca = Acca::new(cfg.acca.clone())?;
    let net = build_backbone(cfg)?;
    let before = acca_weights.to_bytes()?;
    let mut ldrm_weights = net.init(&mut phase_rng(cfg.seed, STREAM_LDRM_INIT));
    let batches = random_batches(
        data,
        cfg.ldrm_batch,
        cfg.crop,
        phase_rng(cfg.seed, STREAM_LDRM_DATA),
    );
    let per_sample = |w: &WeightStore<f32>, s: &Sample| {
        fine_sample(cfg, &acca, net.as_ref(), acca_weights, false, w, s)
    };
    let mut history = History::default();
    fit(
        &mut ldrm_weights,
        cfg,
        cfg.ldrm_iters,
        batches,
        per_sample,
        &mut history,
    )?;
    if acca_weights.to_bytes()? != before {
        return Err(Error::Contract(
            "frozen coarse-model weights changed during training".into(),
        ));
    }
    Ok(LdrmRun {
        acca_weights: acca_weights.clone(),
        ldrm_weights,
        history,
    })
}

/// Joint training of both models on the band objective. The coarse model
/// starts from `acca_init` when given, else from a fresh initialisation.
pub fn train_end_to_end(
    data: &PairSet,
    acca_init: Option<&WeightStore<f32>>,
    cfg: &TrainConfig,
) -> Result<LdrmRun> {
    cfg.validate()?;
    require_data(data)?;
    let acca = Acca::new(cfg.acca.clone())?;
    let net = build_backbone(cfg)?;
    let acca_start = match acca_init {
        Some(w) => w.clone(),
        None => acca.init(&mut phase_rng(cfg.seed, STREAM_ACCA_INIT)),
    };
    let ldrm_start = net.init(&mut phase_rng(cfg.seed, STREAM_LDRM_INIT));
    let mut joint = acca_start.merged(&ldrm_start);
    let batches = random_batches(
        data,
        cfg.ldrm_batch,
        cfg.crop,
        phase_rng(cfg.seed, STREAM_LDRM_DATA),
    );
    let per_sample = |w: &WeightStore<f32>, s: &Sample| {
        fine_sample(
            cfg,
            &acca,
            net.as_ref(),
            &w.subset("acca."),
            true,
            &w.subset("ldrm."),
            s,
        )
    };
    let mut history = History::default();
    fit(
        &mut joint,
        cfg,
        cfg.ldrm_iters,
        batches,
        per_sample,
        &mut history,
    )?;
    Ok(LdrmRun {
        acca_weights: joint.subset("acca."),
        ldrm_weights: joint.subset("ldrm."),
        history,
    })
}

#[derive(Clone, Debug)]
pub struct UnifiedRun {
    pub weights: WeightStore<f32>,
    pub history: History,
}

/// Single-stage baseline: the reference backbone on the raw image, image
/// L1, same iteration budget as the fine phase.
pub fn train_unified(data: &PairSet, cfg: &TrainConfig) -> Result<UnifiedRun> {
    cfg.validate()?;
    require_data(data)?;
    let model = UnifiedBaseline::new(cfg.ldrm.width, cfg.ldrm.blocks);
    let mut weights = model.init(&mut phase_rng(cfg.seed, STREAM_LDRM_INIT));
    let batches = random_batches(
        data,
        cfg.ldrm_batch,
        cfg.crop,
        phase_rng(cfg.seed, STREAM_UNIFIED),
    );
    let per_sample = |w: &WeightStore<f32>, (low, gt): &Sample| {
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, true)?;
        let x = tape.constant(low.clone())?;
        let y = tape.constant(gt.clone())?;
        let out = model.forward(&mut tape, &p, x)?;
        let loss = losses::l1(&mut tape, out, y)?;
        tape.backward(loss)?;
        let l = tape.value(loss).item() as f64;
        Ok((p.grads(&tape), [l, 0.0, l]))
    };
    let mut history = History::default();
    fit(
        &mut weights,
        cfg,
        cfg.ldrm_iters,
        batches,
        per_sample,
        &mut history,
    )?;
    Ok(UnifiedRun { weights, history })
}

/// Inference pipeline for trained weights under `cfg`.
pub fn pipeline(
    cfg: &TrainConfig,
    acca_weights: WeightStore<f32>,
    ldrm_weights: WeightStore<f32>,
) -> Result<Pipeline> {
    Ok(Pipeline {
        acca: Acca::new(cfg.acca.clone())?,
        acca_weights,
        backbone: build_backbone(cfg)?,
        ldrm_weights,
        levels: cfg.levels,
        mode: cfg.codec_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::SynthSpec;
    use crate::wcca::WccaConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            acca_epochs: 2,
            acca_batch: 2,
            ldrm_iters: 3,
            ldrm_batch: 2,
            levels: 3,
            crop: 16,
            acca: AccaConfig {
                wcca: WccaConfig {
                    channels: 8,
                    window: 8,
                    sigmoid_gate: false,
                },
                global_size: 8,
                global_widths: [4, 4, 4],
                per_channel_gamma: false,
            },
            ldrm: LdrmConfig {
                width: 8,
                blocks: 1,
                ..LdrmConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> PairSet {
        PairSet::synthesize(&SynthSpec::default(), 4, 24).unwrap()
    }

    #[test]
    fn config_json_round_trip_and_rejection() {
        let cfg = TrainConfig::default();
        let text = cfg.to_json();
        assert!(text.contains("\"levels\": 4"));
        assert!(text.contains("\"alpha\": 1.0"));
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(TrainConfig::from_json("{\"levls\": 4}").is_err());
        assert!(TrainConfig::from_json("{\"alpha\": -1}").is_err());
        assert!(TrainConfig::from_json("{\"crop\": 60}").is_err());
        let partial = TrainConfig::from_json("{\"phase\": \"e2e\", \"levels\": 3}").unwrap();
        assert_eq!(partial.phase, Phase::EndToEnd);
        assert_eq!(partial.alpha, 1.0);
    }

    #[test]
    fn conforming_units() {
        assert_eq!(conforming_unit(4, 8), 8);
        assert_eq!(conforming_unit(6, 8), 32);
        assert_eq!(conforming_unit(3, 6), 12);
    }

    #[test]
    fn acca_phase_starts_at_identity_loss() {
        let cfg = TrainConfig {
            lr0: 1e-30,
            ..tiny_cfg()
        };
        let data = PairSet::synthesize(&SynthSpec::default(), 2, 16).unwrap();
        let run = train_acca(
            &data,
            &TrainConfig {
                acca_epochs: 1,
                acca_batch: 2,
                ..cfg
            },
        )
        .unwrap();
        // with an identity model the loss is the L1 between the (clamped) input and target
        let expect: f64 = data
            .pairs
            .iter()
            .map(|p| {
                p.low
                    .zip_map(&p.gt, |a, b| (a.max(0.0) - b).abs())
                    .unwrap()
                    .mean() as f64
            })
            .sum::<f64>()
            / 2.0;
        assert!(
            (run.history.rows[0].l_r - expect).abs() < 1e-4,
            "{} vs {expect}",
            run.history.rows[0].l_r
        );
        assert_eq!(run.history.notes, vec![PERCEPTUAL_NOTE.to_owned()]);
    }

    #[test]
    fn frozen_and_joint_modes() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let coarse = train_acca(&data, &cfg).unwrap();
        assert!(train_ldrm(&data, None, &cfg).is_err());
        let frozen = train_ldrm(&data, Some(&coarse.weights), &cfg).unwrap();
        assert_eq!(
            frozen.acca_weights.to_bytes().unwrap(),
            coarse.weights.to_bytes().unwrap()
        );
        assert_eq!(frozen.history.rows.len(), 3);
        let joint = train_end_to_end(&data, Some(&coarse.weights), &cfg).unwrap();
        assert_ne!(
            joint.acca_weights.to_bytes().unwrap(),
            coarse.weights.to_bytes().unwrap()
        );
        assert_eq!(joint.ldrm_weights.len(), frozen.ldrm_weights.len());
        let pipe = pipeline(&cfg, joint.acca_weights, joint.ldrm_weights).unwrap();
        let (y, _) = pipe.run(&data.pairs[0].low).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.shape(), data.pairs[0].low.shape());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let coarse = train_acca(&data, &cfg).unwrap();
        let a = train_ldrm(&data, Some(&coarse.weights), &cfg).unwrap();
        let b = train_ldrm(&data, Some(&coarse.weights), &cfg).unwrap();
        assert_eq!(
            a.ldrm_weights.to_bytes().unwrap(),
            b.ldrm_weights.to_bytes().unwrap()
        );
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn unified_baseline_trains() {
        let cfg = tiny_cfg();
        let run = train_unified(&tiny_data(), &cfg).unwrap();
        assert_eq!(run.history.rows.len(), 3);
        assert!(run.history.to_csv().starts_with("step,l_r,l_i,l_total\n0,"));
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        assert!(matches!(
            train_acca(&PairSet::default(), &tiny_cfg()),
            Err(Error::Config(_))
        ));
    }
}
