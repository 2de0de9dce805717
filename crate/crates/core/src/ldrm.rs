//! Fine restoration on Laplace bands.
//!
//! The bands of the input `M` and of the coarse result `M_l` are upsampled
//! to full resolution and stacked into `6K` channels. A backbone maps them
//! to `3K` channels; channel group `k` is halved `k` times and added to
//! `m^k_l`, giving the restored bands `M_d`, which are then collapsed back
//! into an image.

use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acca::{Acca, AccaTrace};
use crate::error::{Error, Result};
use crate::nn;
use crate::pyramid::{self, Bands, CodecMode};
use crate::tensor::{ConvSpec, PadMode, Real, Tape, Tensor, Var};
use crate::weights::{Bound, WeightStore};

pub const REFERENCE: &str = "reference";

/// A network mapping `N×in×H×W` to `N×out×H×W`.
pub trait Backbone<T: Real>: Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn init(&self, rng: &mut dyn RngCore) -> WeightStore<T>;
    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var>;
}

/// Shape parameters handed to backbone factories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub blocks: usize,
}

impl BackboneSpec {
    /// `6K → 3K` for a `K`-level pyramid.
    pub fn for_levels(levels: usize, width: usize, blocks: usize) -> Self {
        Self {
            in_channels: 6 * levels,
            out_channels: 3 * levels,
            width,
            blocks,
        }
    }
}

/// Entry conv, residual `conv-relu-conv` blocks, zero-initialised exit conv.
#[derive(Clone, Debug)]
pub struct ReferenceBackbone {
    pub spec: BackboneSpec,
    pub prefix: String,
}

impl ReferenceBackbone {
    pub fn new(spec: BackboneSpec, prefix: impl Into<String>) -> Self {
        Self {
            spec,
            prefix: prefix.into(),
        }
    }
}

impl<T: Real> Backbone<T> for ReferenceBackbone {
    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    fn init(&self, mut rng: &mut dyn RngCore) -> WeightStore<T> {
        let (w, pre) = (self.spec.width, &self.prefix);
        let mut s = WeightStore::new();
        nn::init_conv(
            &mut s,
            &format!("{pre}.entry"),
            w,
            self.spec.in_channels,
            3,
            &mut rng,
        );
        for b in 0..self.spec.blocks {
            nn::init_conv(&mut s, &format!("{pre}.block{b}.conv1"), w, w, 3, &mut rng);
            nn::init_conv(&mut s, &format!("{pre}.block{b}.conv2"), w, w, 3, &mut rng);
            // keep the residual stack near identity at the start
            for v in s
                .get_mut(&format!("{pre}.block{b}.conv2.weight"))
                .expect("inserted")
                .data_mut()
            {
                *v *= T::from_f64(0.1);
            }
        }
        nn::zero_conv(&mut s, &format!("{pre}.exit"), self.spec.out_channels, w, 3);
        s
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let pre = &self.prefix;
        let zero = ConvSpec::same(PadMode::Zero, 3);
        let h = nn::conv(
            tape,
            p,
            &format!("{pre}.entry"),
            x,
            ConvSpec::same(PadMode::Reflect, 3),
        )?;
        let mut h = tape.relu(h)?;
        for b in 0..self.spec.blocks {
            let r = nn::conv(tape, p, &format!("{pre}.block{b}.conv1"), h, zero)?;
            let r = tape.relu(r)?;
            let r = nn::conv(tape, p, &format!("{pre}.block{b}.conv2"), r, zero)?;
            h = tape.add(h, r)?;
        }
        nn::conv(tape, p, &format!("{pre}.exit"), h, zero)
    }
}

pub type BackboneFactory<T> = Arc<dyn Fn(BackboneSpec) -> Box<dyn Backbone<T>> + Send + Sync>;

/// Named backbone factories, each validated by a dry run on registration.
pub struct BackboneRegistry<T> {
    factories: IndexMap<String, BackboneFactory<T>>,
}

impl<T: Real> fmt::Debug for BackboneRegistry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

/// Level counts exercised by the registration dry run.
const DRY_RUN_LEVELS: [usize; 4] = [3, 4, 5, 6];
const DRY_RUN_SIZE: usize = 8;

impl<T: Real> BackboneRegistry<T> {
    pub fn empty() -> Self {
        Self {
            factories: IndexMap::new(),
        }
    }

    /// Registry holding the reference backbone.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(REFERENCE, |spec| {
            Box::new(ReferenceBackbone::new(spec, "ldrm")) as Box<dyn Backbone<T>>
        })
        .expect("reference backbone satisfies the contract");
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<()>
    where
        F: Fn(BackboneSpec) -> Box<dyn Backbone<T>> + Send + Sync + 'static,
    {
        let factory: BackboneFactory<T> = Arc::new(factory);
        for k in DRY_RUN_LEVELS {
            let spec = BackboneSpec::for_levels(k, 4, 1);
            let net = factory(spec);
            check_contract(net.as_ref(), spec, DRY_RUN_SIZE).map_err(|e| {
                let why = match e {
                    Error::Contract(m) => m,
                    other => other.to_string(),
                };
                Error::Contract(format!("backbone `{name}` rejected at K={k}: {why}"))
            })?;
        }
        self.factories.insert(name.to_owned(), factory);
        Ok(())
    }

    pub fn build(&self, name: &str, spec: BackboneSpec) -> Result<Box<dyn Backbone<T>>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::config(format!(
                "unknown backbone `{name}` (registered: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Ok(f(spec))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

fn check_contract<T: Real>(net: &dyn Backbone<T>, spec: BackboneSpec, size: usize) -> Result<()> {
    if net.in_channels() != spec.in_channels || net.out_channels() != spec.out_channels {
        return Err(Error::Contract(format!(
            "declares {}→{} channels, expected {}→{}",
            net.in_channels(),
            net.out_channels(),
            spec.in_channels,
            spec.out_channels
        )));
    }
    let mut tape = Tape::new();
    let store = net.init(&mut ChaCha8Rng::seed_from_u64(0));
    let p = store.bind(&mut tape, false)?;
    let x = tape.constant(Tensor::zeros(&[1, spec.in_channels, size, size]))?;
    let y = net.forward(&mut tape, &p, x)?;
    let want = [1, spec.out_channels, size, size];
    if tape.shape(y) != want {
        return Err(Error::Contract(format!(
            "emits {:?}, expected {want:?}",
            tape.shape(y)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdrmConfig {
    pub backbone: String,
    pub width: usize,
    pub blocks: usize,
}

impl Default for LdrmConfig {
    fn default() -> Self {
        Self {
            backbone: REFERENCE.to_owned(),
            width: 32,
            blocks: 4,
        }
    }
}

/// `M_d` from the stacked bands: backbone output group `k`, halved `k`
/// times, added to `m^k_l`.
pub fn ldrm_forward<T: Real>(
    tape: &mut Tape<T>,
    net: &dyn Backbone<T>,
    p: &Bound,
    m: &Bands,
    ml: &Bands,
) -> Result<Bands> {
    let k = m.levels();
    let stacked = pyramid::stack_bands(tape, m, ml)?;
    let y = net.forward(tape, p, stacked)?;
    let (_, c, h, w) = tape.value(y).dims4()?;
    let (_, _, h0, w0) = tape.value(stacked).dims4()?;
    if c != 3 * k || (h, w) != (h0, w0) {
        return Err(Error::Contract(format!(
            "backbone produced {:?}, expected {} channels at {h0}×{w0}",
            tape.shape(y),
            3 * k
        )));
    }
    let mut vars = Vec::with_capacity(k);
    for (level, &base) in ml.vars.iter().enumerate() {
        let mut r = tape.slice_channels(y, 3 * level, 3)?;
        for _ in 0..level {
            r = tape.downsample2(r)?;
        }
        vars.push(tape.add(base, r)?);
    }
    Ok(Bands {
        vars,
        mode: ml.mode,
    })
}

/// Tape handles of a full coarse-to-fine pass.
#[derive(Clone, Debug)]
pub struct EnhanceTrace {
    pub coarse: AccaTrace,
    pub m: Bands,
    pub ml: Bands,
    pub md: Bands,
    pub out: Var,
}

/// `I_c = reconstruct(ldrm(stack(Lap(I), Lap(acca(I)))))`.
#[allow(clippy::too_many_arguments)]
pub fn enhance<T: Real>(
    tape: &mut Tape<T>,
    acca: &Acca,
    pa: &Bound,
    net: &dyn Backbone<T>,
    pd: &Bound,
    image: Var,
    levels: usize,
    mode: CodecMode,
) -> Result<EnhanceTrace> {
    let coarse = acca.forward(tape, pa, image)?;
    let m = pyramid::decompose(tape, image, levels, mode)?;
    let ml = pyramid::decompose(tape, coarse.out, levels, mode)?;
    let md = ldrm_forward(tape, net, pd, &m, &ml)?;
    let out = pyramid::reconstruct(tape, &md)?;
    Ok(EnhanceTrace {
        coarse,
        m,
        ml,
        md,
        out,
    })
}

/// Trained coarse and fine models ready for inference.
pub struct Pipeline {
    pub acca: Acca,
    pub acca_weights: WeightStore<f32>,
    pub backbone: Box<dyn Backbone<f32>>,
    pub ldrm_weights: WeightStore<f32>,
    pub levels: usize,
    pub mode: CodecMode,
}

impl Pipeline {
    /// Enhanced image clamped to `[0, 1]`, plus the coarse result.
    pub fn run(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let pa = self.acca_weights.bind(&mut tape, false)?;
        let pd = self.ldrm_weights.bind(&mut tape, false)?;
        let x = tape.constant(image.clone())?;
        let t = enhance(
            &mut tape,
            &self.acca,
            &pa,
            self.backbone.as_ref(),
            &pd,
            x,
            self.levels,
            self.mode,
        )?;
        let clamp = |v: f32| v.clamp(0.0, 1.0);
        Ok((
            tape.value(t.out).map(clamp),
            tape.value(t.coarse.out).map(clamp),
        ))
    }
}

/// Single-stage comparison model: the reference backbone on the raw image,
/// residual over the input.
#[derive(Clone, Debug)]
pub struct UnifiedBaseline {
    pub net: ReferenceBackbone,
}

impl UnifiedBaseline {
    pub fn new(width: usize, blocks: usize) -> Self {
        let spec = BackboneSpec {
            in_channels: 3,
            out_channels: 3,
            width,
            blocks,
        };
        Self {
            net: ReferenceBackbone::new(spec, "unified"),
        }
    }

    pub fn init<T: Real>(&self, rng: &mut dyn RngCore) -> WeightStore<T> {
        Backbone::<T>::init(&self.net, rng)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let r = self.net.forward(tape, p, image)?;
        tape.add(image, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acca::AccaConfig;
    use crate::pyramid::PyramidStack;
    use crate::tensor::gradcheck::grad_check;
    use crate::wcca::WccaConfig;
    use rand::Rng;

    fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.05..1.0))
    }

    fn perturb(store: &mut WeightStore<f64>, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in store.iter_mut() {
            let noise: Tensor<f64> = nn::normal(t.shape(), std, &mut rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(a, b)| *a += b);
        }
    }

    /// Emits one channel too many.
    struct Wide(ReferenceBackbone);

    impl Backbone<f64> for Wide {
        fn in_channels(&self) -> usize {
            self.0.spec.in_channels
        }
        fn out_channels(&self) -> usize {
            self.0.spec.out_channels
        }
        fn init(&self, rng: &mut dyn RngCore) -> WeightStore<f64> {
            Backbone::<f64>::init(&self.0, rng)
        }
        fn forward(&self, tape: &mut Tape<f64>, p: &Bound, x: Var) -> Result<Var> {
            let y = self.0.forward(tape, p, x)?;
            let extra = tape.slice_channels(y, 0, 1)?;
            tape.concat(&[y, extra])
        }
    }

    #[test]
    fn registry_accepts_reference_and_rejects_wide() {
        let mut r = BackboneRegistry::<f64>::with_defaults();
        assert_eq!(r.names().collect::<Vec<_>>(), vec![REFERENCE]);
        let err = r
            .register("wide", |spec| {
                Box::new(Wide(ReferenceBackbone::new(spec, "w"))) as Box<dyn Backbone<f64>>
            })
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
        assert!(r.build("wide", BackboneSpec::for_levels(4, 8, 1)).is_err());
    }

    #[test]
    fn reference_param_count() {
        let net = ReferenceBackbone::new(BackboneSpec::for_levels(4, 32, 4), "ldrm");
        let s: WeightStore<f32> = Backbone::<f32>::init(&net, &mut ChaCha8Rng::seed_from_u64(0));
        let conv = |i: usize, o: usize| i * o * 9 + o;
        assert_eq!(
            s.param_count(),
            conv(24, 32) + 8 * conv(32, 32) + conv(32, 12)
        );
    }

    #[test]
    fn zero_exit_gives_coarse_bands() {
        for k in [3, 4, 5, 6] {
            let net = ReferenceBackbone::new(BackboneSpec::for_levels(k, 8, 1), "ldrm");
            let store: WeightStore<f64> =
                Backbone::<f64>::init(&net, &mut ChaCha8Rng::seed_from_u64(k as u64));
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false).unwrap();
            let x = image(&[1, 3, 64, 64], 1);
            let xl = x.map(|v| v.sqrt());
            let m = PyramidStack::decompose(&x, k, CodecMode::Exact)
                .unwrap()
                .bind(&mut tape)
                .unwrap();
            let ml_stack = PyramidStack::decompose(&xl, k, CodecMode::Exact).unwrap();
            let ml = ml_stack.bind(&mut tape).unwrap();
            let md = ldrm_forward(&mut tape, &net, &p, &m, &ml).unwrap();
            assert_eq!(md.to_stack(&tape), ml_stack);
        }
    }

    #[test]
    fn identity_pipeline_reproduces_input() {
        let acca = Acca::new(AccaConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pa_store = acca.init::<f64, _>(&mut rng);
        let net = ReferenceBackbone::new(BackboneSpec::for_levels(4, 8, 1), "ldrm");
        let pd_store: WeightStore<f64> = Backbone::<f64>::init(&net, &mut rng);
        let x = image(&[1, 3, 64, 64], 4);
        let mut tape = Tape::new();
        let pa = pa_store.bind(&mut tape, false).unwrap();
        let pd = pd_store.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let t = enhance(&mut tape, &acca, &pa, &net, &pd, xv, 4, CodecMode::Exact).unwrap();
        assert!(tape.value(t.out).max_abs_diff(&x).unwrap() <= 1e-6);
        for (a, b) in t.md.vars.iter().zip(&t.m.vars) {
            assert_eq!(tape.shape(*a), tape.shape(*b));
        }
    }

    #[test]
    fn gradients_through_backbone_and_band_heads() {
        let net = ReferenceBackbone::new(BackboneSpec::for_levels(3, 4, 1), "ldrm");
        let mut store: WeightStore<f64> =
            Backbone::<f64>::init(&net, &mut ChaCha8Rng::seed_from_u64(5));
        perturb(&mut store, 6, 0.05);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        let inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| store.get(n).unwrap().clone())
            .collect();
        let x = image(&[1, 3, 8, 8], 7);
        let m = PyramidStack::decompose(&x, 3, CodecMode::Exact).unwrap();
        let ml = PyramidStack::decompose(&x.map(|v| v * 1.5), 3, CodecMode::Exact).unwrap();
        let r = grad_check(
            |tape, vars| {
                let p = names
                    .iter()
                    .zip(vars)
                    .fold(Bound::default(), |acc, (n, v)| acc.with(n, *v));
                let (mb, mlb) = (m.bind(tape)?, ml.bind(tape)?);
                let md = ldrm_forward(tape, &net, &p, &mb, &mlb)?;
                let img = pyramid::reconstruct(tape, &md)?;
                let sq = tape.mul(img, img)?;
                tape.mean(sq)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn unified_baseline_starts_at_identity() {
        let u = UnifiedBaseline::new(8, 2);
        let s = u.init::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let x = image(&[1, 3, 8, 8], 1);
        let xv = tape.constant(x.clone()).unwrap();
        let y = u.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn pipeline_keeps_shape_and_range() {
        let acca = Acca::new(AccaConfig {
            wcca: WccaConfig {
                channels: 8,
                window: 8,
                sigmoid_gate: false,
            },
            ..AccaConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let acca_weights = acca.init(&mut rng);
        let reg = BackboneRegistry::<f32>::with_defaults();
        let backbone = reg
            .build(REFERENCE, BackboneSpec::for_levels(4, 8, 1))
            .unwrap();
        let ldrm_weights = backbone.init(&mut rng);
        let pipe = Pipeline {
            acca,
            acca_weights,
            backbone,
            ldrm_weights,
            levels: 4,
            mode: CodecMode::Exact,
        };
        let x = image(&[1, 3, 16, 24], 10).cast::<f32>();
        let (y, coarse) = pipe.run(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(coarse.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
