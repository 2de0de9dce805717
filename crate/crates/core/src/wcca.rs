//! Window-based convolutional composition attention.
//!
//! A feature map `F` is cut into non-overlapping `s×s` windows. A grouped
//! convolution restricted to each window produces patch features `P`; three
//! stride-`s` convolutions collapse every patch to a row factor `f^h`
//! (length `s`), a column factor `f^w` (length `s`) and a channel factor
//! `f^c` (length `C`). Their rank-1 product `o_n` is a full 3D similarity
//! map for the patch, applied to `P` elementwise.
//!
//! Weights of one block live under `{prefix}.split`, `{prefix}.fh`,
//! `{prefix}.fw` and `{prefix}.fc` in a [`WeightStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ConvSpec, PadMode, Padding, Real, Tape, Tensor, Var};
use crate::weights::{Bound, WeightStore};

/// Std of the factor-conv weights relative to He initialisation, so that the
/// similarity map starts close to all-ones.
const FACTOR_INIT_GAIN: f64 = 0.1;
/// Std of the perturbation added to the delta split kernels.
const SPLIT_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WccaConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Window size `s`.
    pub window: usize,
    /// Passes the similarity map through a sigmoid before aggregation.
    pub sigmoid_gate: bool,
}

impl Default for WccaConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            window: 8,
            sigmoid_gate: false,
        }
    }
}

impl WccaConfig {
    /// Groups of the split convolution: `C/s` when `s` divides `C`, else
    /// `gcd(C, s)`.
    pub fn groups(&self) -> usize {
        if self.channels.is_multiple_of(self.window) {
            self.channels / self.window
        } else {
            gcd(self.channels, self.window)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 {
            return Err(Error::config("W-CCA channels and window must be positive"));
        }
        Ok(())
    }

    /// Size-preserving inside each window; zero padding keeps windows
    /// independent.
    fn split_spec(&self) -> ConvSpec {
        ConvSpec::new(1, Padding::same(PadMode::Zero, self.window), self.groups())
    }

    fn factor_spec(&self) -> ConvSpec {
        ConvSpec::new(self.window, Padding::none(), 1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Patch features of one feature map, kept as an `N×C×H×W` canvas.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    pub map: Var,
    pub batch: usize,
    pub channels: usize,
    pub window: usize,
    /// Windows per column and per row, `(H/s, W/s)`.
    pub grid: (usize, usize),
}

impl PatchGrid {
    /// Number of patches per image.
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch `n` (row-major over the grid) of image `b`, channel-first
    /// `C×s×s`.
    pub fn patch<T: Real>(&self, tape: &Tape<T>, b: usize, n: usize) -> Result<Tensor<T>> {
        patch_of(tape.value(self.map), b, n, self.window)
    }
}

/// Window `n` of image `b` from an `N×C×H×W` tensor, as `C×s×s`.
pub fn patch_of<T: Real>(map: &Tensor<T>, b: usize, n: usize, s: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = map.dims4()?;
    let gw = w / s;
    let (gy, gx) = (n / gw, n % gw);
    let one = Tensor::from_vec(
        &[1, c, h, w],
        map.data()[b * c * h * w..(b + 1) * c * h * w].to_vec(),
    )?;
    one.crop(gy * s, gx * s, s, s)?.reshape(&[c, s, s])
}

/// Factor maps for every window: `h`, `w` are `N×s×Gh×Gw`, `c` is
/// `N×C×Gh×Gw`.
#[derive(Clone, Copy, Debug)]
pub struct Factors {
    pub h: Var,
    pub w: Var,
    pub c: Var,
}

/// One W-CCA block.
#[derive(Clone, Debug)]
pub struct Wcca {
    pub cfg: WccaConfig,
    pub prefix: String,
}

impl Wcca {
    pub fn new(cfg: WccaConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Near-identity start: delta split kernels with small noise, small
    /// factor weights, factor biases one.
    pub fn init<T: Real, R: Rng>(&self, store: &mut WeightStore<T>, rng: &mut R) {
        self.init_identity(store);
        let (c, s) = (self.cfg.channels, self.cfg.window);
        let split = store
            .get_mut(&self.name("split.weight"))
            .expect("just inserted");
        let noise: Tensor<T> = nn::normal(split.shape(), SPLIT_INIT_NOISE, rng);
        split
            .data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(a, &b)| *a += b);
        let std = FACTOR_INIT_GAIN * (2.0 / (c * s * s) as f64).sqrt();
        for (part, out) in [("fh", s), ("fw", s), ("fc", c)] {
            store.insert(
                self.name(&format!("{part}.weight")),
                nn::normal(&[out, c, s, s], std, rng),
            );
        }
    }

    /// Exact identity: `wcca_forward(F) == F`.
    pub fn init_identity<T: Real>(&self, store: &mut WeightStore<T>) {
        let (c, s) = (self.cfg.channels, self.cfg.window);
        let per_group = c / self.cfg.groups();
        let mut split = Tensor::zeros(&[c, per_group, s, s]);
        for o in 0..c {
            let i = o % per_group;
            split.data_mut()[((o * per_group + i) * s + s / 2) * s + s / 2] = T::one();
        }
        store.insert(self.name("split.weight"), split);
        store.insert(self.name("split.bias"), Tensor::zeros(&[c]));
        for (part, out) in [("fh", s), ("fw", s), ("fc", c)] {
            store.insert(
                self.name(&format!("{part}.weight")),
                Tensor::zeros(&[out, c, s, s]),
            );
            store.insert(self.name(&format!("{part}.bias")), Tensor::ones(&[out]));
        }
    }

    /// Window-local grouped convolution producing the patch features.
    pub fn split_patches<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f: Var,
    ) -> Result<PatchGrid> {
        let (n, c, h, w) = tape.value(f).dims4()?;
        let s = self.cfg.window;
        if c != self.cfg.channels {
            return Err(Error::dim(format!(
                "W-CCA expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::dim(format!(
                "{h}×{w} is not divisible by window {s}"
            )));
        }
        let windows = tape.window_partition(f, s)?;
        let split = nn::conv(tape, p, &self.name("split"), windows, self.cfg.split_spec())?;
        let map = tape.window_merge(split, n, h, w)?;
        Ok(PatchGrid {
            map,
            batch: n,
            channels: c,
            window: s,
            grid: (h / s, w / s),
        })
    }

    /// One stride-`s` convolution per factor, covering all patches at once.
    pub fn regress_factors<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        patches: &PatchGrid,
    ) -> Result<Factors> {
        let spec = self.cfg.factor_spec();
        Ok(Factors {
            h: nn::conv(tape, p, &self.name("fh"), patches.map, spec)?,
            w: nn::conv(tape, p, &self.name("fw"), patches.map, spec)?,
            c: nn::conv(tape, p, &self.name("fc"), patches.map, spec)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        let patches = self.split_patches(tape, p, f)?;
        let factors = self.regress_factors(tape, p, &patches)?;
        let mut o = compose_similarity(tape, &factors)?;
        if self.cfg.sigmoid_gate {
            o = tape.sigmoid(o)?;
        }
        omni_aggregate(tape, patches.map, o)
    }
}

/// Rank-1 composition `o[c, y, x] = f^h[y]·f^w[x]·f^c[c]` inside every
/// window.
pub fn compose_similarity<T: Real>(tape: &mut Tape<T>, f: &Factors) -> Result<Var> {
    tape.window_compose(f.h, f.w, f.c)
}

/// `p̂ = o ⊙ p`.
pub fn omni_aggregate<T: Real>(tape: &mut Tape<T>, p: Var, o: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(o) {
        return Err(Error::dim(format!(
            "aggregate: patches {:?} vs similarity {:?}",
            tape.shape(p),
            tape.shape(o)
        )));
    }
    tape.mul(o, p)
}

/// Closed-form operation count `4HWC + 2HWC²/s`.
pub fn flops_analytic(h: u64, w: u64, c: u64, s: u64) -> u64 {
    4 * h * w * c + 2 * h * w * c * c / s
}

/// Multiply-accumulates executed by one forward pass on a `1×C×H×W` input.
pub fn flops_empirical(h: usize, w: usize, cfg: WccaConfig) -> Result<u64> {
    let block = Wcca::new(cfg, "probe")?;
    let mut store = WeightStore::<f32>::new();
    block.init_identity(&mut store);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false)?;
    let f = tape.constant(Tensor::zeros(&[1, cfg.channels, h, w]))?;
    let before = tape.macs();
    block.forward(&mut tape, &p, f)?;
    Ok(tape.macs() - before)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn cfg(c: usize, s: usize) -> WccaConfig {
        WccaConfig {
            channels: c,
            window: s,
            sigmoid_gate: false,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_block(c: usize, s: usize, seed: u64) -> (Wcca, WeightStore<f64>) {
        let block = Wcca::new(cfg(c, s), "b").unwrap();
        let mut store = WeightStore::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (block, store)
    }

    fn run(block: &Wcca, store: &WeightStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let f = tape.constant(x.clone()).unwrap();
        let y = block.forward(&mut tape, &p, f).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn groups_rule() {
        assert_eq!(cfg(16, 8).groups(), 2);
        assert_eq!(cfg(8, 8).groups(), 1);
        assert_eq!(cfg(12, 8).groups(), 4);
        assert_eq!(cfg(6, 4).groups(), 2);
    }

    #[test]
    fn split_grid_and_identity() {
        let block = Wcca::new(cfg(16, 8), "b").unwrap();
        let mut store = WeightStore::new();
        block.init_identity(&mut store);
        let x = random(&[1, 16, 16, 16], 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let f = tape.constant(x.clone()).unwrap();
        let grid = block.split_patches(&mut tape, &p, f).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid.grid, (2, 2));
        for n in 0..4 {
            assert_eq!(
                grid.patch(&tape, 0, n).unwrap(),
                patch_of(&x, 0, n, 8).unwrap()
            );
        }
        // identity split and all-ones factors
        assert_eq!(run(&block, &store, &x), x);
    }

    #[test]
    fn split_rejects_indivisible() {
        let (block, store) = random_block(8, 8, 0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let f = tape.constant(Tensor::zeros(&[1, 8, 12, 16])).unwrap();
        assert!(matches!(
            block.split_patches(&mut tape, &p, f),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn locality_under_window_perturbation() {
        let (block, store) = random_block(8, 4, 3);
        let x = random(&[1, 8, 12, 8], 4);
        let base = run(&block, &store, &x);
        let mut x2 = x.clone();
        // perturb one pixel of window (1, 0)
        x2.data_mut()[3 * 12 * 8 + 5 * 8 + 2] += 0.5;
        let moved = run(&block, &store, &x2);
        for n in 0..6 {
            let same = patch_of(&base, 0, n, 4).unwrap() == patch_of(&moved, 0, n, 4).unwrap();
            assert_eq!(same, n != 2, "window {n}");
        }
    }

    #[test]
    fn factors_zero_and_bias_only() {
        let block = Wcca::new(cfg(8, 4), "b").unwrap();
        let mut store = WeightStore::<f64>::new();
        block.init_identity(&mut store);
        for part in ["fh", "fw", "fc"] {
            let b = store.get_mut(&format!("b.{part}.bias")).unwrap();
            let n = b.len();
            *b = Tensor::from_fn(&[n], |i| 0.5 + i as f64);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let f = tape.constant(random(&[1, 8, 8, 8], 2)).unwrap();
        let grid = block.split_patches(&mut tape, &p, f).unwrap();
        let fac = block.regress_factors(&mut tape, &p, &grid).unwrap();
        assert_eq!(tape.shape(fac.h), &[1, 4, 2, 2]);
        assert_eq!(tape.shape(fac.c), &[1, 8, 2, 2]);
        for (v, len) in [(fac.h, 4), (fac.c, 8)] {
            for (i, &val) in tape.value(v).data().iter().enumerate() {
                assert_eq!(val, 0.5 + (i / 4 % len) as f64);
            }
        }

        for part in ["fh", "fw", "fc"] {
            let b = store.get_mut(&format!("b.{part}.bias")).unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let f = tape.constant(random(&[1, 8, 8, 8], 2)).unwrap();
        let grid = block.split_patches(&mut tape, &p, f).unwrap();
        let fac = block.regress_factors(&mut tape, &p, &grid).unwrap();
        for v in [fac.h, fac.w, fac.c] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn composition_matches_triple_loop_and_is_rank_one() {
        let (s, c, gh, gw) = (4, 3, 2, 3);
        let h = random(&[1, s, gh, gw], 10);
        let w = random(&[1, s, gh, gw], 11);
        let cc = random(&[1, c, gh, gw], 12);
        let mut tape = Tape::new();
        let (hv, wv, cv) = (
            tape.constant(h.clone()).unwrap(),
            tape.constant(w.clone()).unwrap(),
            tape.constant(cc.clone()).unwrap(),
        );
        let o = compose_similarity(
            &mut tape,
            &Factors {
                h: hv,
                w: wv,
                c: cv,
            },
        )
        .unwrap();
        let o = tape.value(o);
        let cell =
            |t: &Tensor<f64>, k: usize, gy: usize, gx: usize| t.data()[(k * gh + gy) * gw + gx];
        for gy in 0..gh {
            for gx in 0..gw {
                let n = gy * gw + gx;
                let patch = patch_of(o, 0, n, s).unwrap();
                for k in 0..c {
                    for i in 0..s {
                        for j in 0..s {
                            let want =
                                cell(&h, i, gy, gx) * cell(&w, j, gy, gx) * cell(&cc, k, gy, gx);
                            assert_eq!(patch.data()[(k * s + i) * s + j], want);
                        }
                    }
                    // every 2×2 minor of a channel slice vanishes
                    let at = |i: usize, j: usize| patch.data()[(k * s + i) * s + j];
                    for (i0, i1) in [(0, 1), (0, 3), (1, 2)] {
                        for (j0, j1) in [(0, 2), (1, 3), (2, 3)] {
                            let minor = at(i0, j0) * at(i1, j1) - at(i0, j1) * at(i1, j0);
                            assert!(minor.abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let p = random(&[1, 2, 4, 4], 20);
        let o = random(&[1, 2, 4, 4], 21);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone()).unwrap();
        let ones = tape.constant(Tensor::ones(&[1, 2, 4, 4])).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let ov = tape.constant(o.clone()).unwrap();
        let a = omni_aggregate(&mut tape, pv, ones).unwrap();
        assert_eq!(tape.value(a), &p);
        let z = omni_aggregate(&mut tape, pv, zeros).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let r = omni_aggregate(&mut tape, pv, ov).unwrap();
        assert_eq!(tape.value(r), &p.zip_map(&o, |a, b| a * b).unwrap());
        let bad = tape.constant(Tensor::ones(&[1, 2, 4, 2])).unwrap();
        assert!(omni_aggregate(&mut tape, pv, bad).is_err());
    }

    #[test]
    fn factor_gradients_wrt_weights() {
        let (block, store) = random_block(4, 4, 30);
        let x = random(&[1, 4, 8, 8], 31);
        let names = ["b.fh.weight", "b.fw.weight", "b.fc.weight", "b.fc.bias"];
        let inputs: Vec<_> = names
            .iter()
            .map(|n| store.get(n).unwrap().clone())
            .collect();
        let r = grad_check(
            |tape, vars| {
                let p = names
                    .iter()
                    .zip(vars)
                    .fold(store.bind(tape, false)?, |acc, (n, v)| acc.with(n, *v));
                let f = tape.constant(x.clone())?;
                let grid = block.split_patches(tape, &p, f)?;
                let fac = block.regress_factors(tape, &p, &grid)?;
                let a = tape.sum(fac.h)?;
                let b = tape.mul(fac.w, fac.w)?;
                let b = tape.sum(b)?;
                let c = tape.mul(fac.c, fac.c)?;
                let c = tape.sum(c)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn forward_gradient_end_to_end() {
        let (block, store) = random_block(4, 4, 40);
        let x = random(&[1, 4, 8, 8], 41);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        let mut inputs: Vec<_> = names
            .iter()
            .map(|n| store.get(n).unwrap().clone())
            .collect();
        inputs.push(x);
        let r = grad_check(
            |tape, vars| {
                let mut p = Bound::default();
                for (n, v) in names.iter().zip(vars) {
                    p = p.with(n, *v);
                }
                let y = block.forward(tape, &p, vars[names.len()])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sigmoid_gate_changes_output() {
        let (mut block, store) = random_block(4, 4, 50);
        let x = random(&[1, 4, 4, 4], 51);
        let plain = run(&block, &store, &x);
        block.cfg.sigmoid_gate = true;
        assert_ne!(run(&block, &store, &x), plain);
    }

    #[test]
    fn analytic_count() {
        assert_eq!(flops_analytic(256, 256, 16, 8), 8_388_608);
        assert_eq!(flops_analytic(1, 1, 1, 1), 6);
        assert_eq!(
            flops_analytic(512, 512, 16, 8),
            4 * flops_analytic(256, 256, 16, 8)
        );
    }

    #[test]
    fn empirical_count_scales_with_area_and_width() {
        let c = cfg(16, 8);
        let small = flops_empirical(32, 32, c).unwrap();
        let big = flops_empirical(64, 64, c).unwrap();
        assert_eq!(big, 4 * small);
        let by_c: Vec<u64> = [8, 16, 32]
            .iter()
            .map(|&ch| flops_empirical(32, 32, cfg(ch, 8)).unwrap())
            .collect();
        assert!(by_c[0] < by_c[1] && by_c[1] < by_c[2]);
    }
}
