//! Procedural clean images and their synthetic low-light versions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, Depth};
use crate::tensor::Tensor;

/// Salt separating the clean-image stream from the degradation stream.
const CLEAN_SALT: u64 = 0x636c_6561_6e00_0000;

/// Degradation ranges, sampled uniformly per pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub gamma_dark: (f64, f64),
    pub gain: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            gamma_dark: (2.0, 3.5),
            gain: (0.1, 0.4),
            noise_sigma: (0.01, 0.05),
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Fixed degradation, mainly for tests.
    pub fn fixed(gamma: f64, gain: f64, sigma: f64, seed: u64) -> Self {
        Self {
            gamma_dark: (gamma, gamma),
            gain: (gain, gain),
            noise_sigma: (sigma, sigma),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("gamma_dark", self.gamma_dark),
            ("gain", self.gain),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::config(format!("invalid {name} range ({lo}, {hi})")));
            }
        }
        if self.gamma_dark.0 <= 0.0 {
            return Err(Error::config("gamma_dark must be positive"));
        }
        Ok(())
    }
}

/// Random generator for `(seed, index)`; streams never overlap.
fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// `low = clip(gain·clean^γ + N(0, σ))`, `gt = clean`.
pub fn synth_pair(
    clean: &Tensor<f32>,
    spec: &SynthSpec,
    index: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, index);
    let gamma = uniform(&mut rng, spec.gamma_dark);
    let gain = uniform(&mut rng, spec.gain);
    let sigma = uniform(&mut rng, spec.noise_sigma);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("noise sigma: {e}")))?;
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let dark = gain * (v as f64).powf(gamma);
            let n = if sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (dark + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((Tensor::from_vec(clean.shape(), data)?, clean.clone()))
}

/// Deterministic procedural image `1×3×size×size`: a colour gradient with
/// polygons, discs, a checker patch and smooth noise on top.
pub fn clean_image(seed: u64, index: u64, size: usize) -> Tensor<f32> {
    let mut rng = stream(seed ^ CLEAN_SALT, index);
    let mut img = vec![[0.0f64; 3]; size * size];
    let colour = |rng: &mut ChaCha8Rng, lo: f64| {
        [
            rng.random_range(lo..1.0),
            rng.random_range(lo..1.0),
            rng.random_range(lo..1.0),
        ]
    };

    let (c0, c1) = (colour(&mut rng, 0.15), colour(&mut rng, 0.15));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let inv = 1.0 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let t = 0.5
                + 0.5
                    * ((x as f64 * inv - 0.5) * dx + (y as f64 * inv - 0.5) * dy)
                    * std::f64::consts::SQRT_2;
            img[y * size + x] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
        }
    }

    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = colour(&mut rng, 0.0);
        let (cx, cy) = (
            rng.random_range(0.0..1.0) * size as f64,
            rng.random_range(0.0..1.0) * size as f64,
        );
        let radius = rng.random_range(0.1..0.35) * size as f64;
        match rng.random_range(0..3) {
            0 => {
                let n = rng.random_range(3..7);
                let mut angles: Vec<f64> = (0..n)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                angles.sort_by(f64::total_cmp);
                let poly: Vec<(f64, f64)> = angles
                    .iter()
                    .map(|a| {
                        let r = radius * rng.random_range(0.5..1.0);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                paint(&mut img, size, col, |x, y| inside(&poly, x, y));
            }
            1 => paint(&mut img, size, col, |x, y| {
                (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
            }),
            _ => {
                let period = rng.random_range(2..9) as f64;
                let other = colour(&mut rng, 0.0);
                let (x0, y0, x1, y1) = (cx - radius, cy - radius, cx + radius, cy + radius);
                for y in 0..size {
                    for x in 0..size {
                        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                        if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                            let odd = (((fx - x0) / period) as i64 + ((fy - y0) / period) as i64)
                                % 2
                                == 1;
                            img[y * size + x] = if odd { other } else { col };
                        }
                    }
                }
            }
        }
    }

    // smooth texture: coarse white noise, bilinearly enlarged
    let coarse = (size / 8).max(2);
    let amp = rng.random_range(0.02..0.08);
    let grid: Vec<f64> = (0..coarse * coarse)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let scale = coarse as f64 / size as f64;
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (coarse - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(coarse - 1);
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (coarse - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(coarse - 1);
            let v = (grid[y0 * coarse + x0] * (1.0 - fx) + grid[y0 * coarse + x1] * fx)
                * (1.0 - fy)
                + (grid[y1 * coarse + x0] * (1.0 - fx) + grid[y1 * coarse + x1] * fx) * fy;
            for c in &mut img[y * size + x] {
                *c += amp * v;
            }
        }
    }

    let plane = size * size;
    Tensor::from_fn(&[1, 3, size, size], |i| {
        img[i % plane][i / plane].clamp(0.0, 1.0) as f32
    })
}

fn paint(img: &mut [[f64; 3]], size: usize, col: [f64; 3], hit: impl Fn(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if hit(x as f64 + 0.5, y as f64 + 0.5) {
                img[y * size + x] = col;
            }
        }
    }
}

/// Even-odd rule.
fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub low: Tensor<f32>,
    pub gt: Tensor<f32>,
}

/// Ordered list of paired images.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    count: usize,
    size: usize,
    spec: SynthSpec,
    fingerprint: String,
}

impl PairSet {
    /// `count` synthetic pairs of `size×size` images.
    pub fn synthesize(spec: &SynthSpec, count: usize, size: usize) -> Result<Self> {
        let pairs = (0..count as u64)
            .map(|i| {
                let clean = clean_image(spec.seed, i, size);
                let (low, gt) = synth_pair(&clean, spec, i)?;
                Ok(Pair {
                    name: format!("{i:04}"),
                    low,
                    gt,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    /// Synthetic pairs built on user-supplied clean images.
    pub fn from_clean_dir(dir: impl AsRef<Path>, spec: &SynthSpec) -> Result<Self> {
        let pairs = image_files(dir.as_ref())?
            .into_iter()
            .enumerate()
            .map(|(i, (name, path))| {
                let (low, gt) = synth_pair(&io::load_image(&path)?, spec, i as u64)?;
                Ok(Pair { name, low, gt })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `n` pairs and the rest.
    pub fn split(&self, n: usize) -> (PairSet, PairSet) {
        let n = n.min(self.pairs.len());
        (
            PairSet {
                pairs: self.pairs[..n].to_vec(),
            },
            PairSet {
                pairs: self.pairs[n..].to_vec(),
            },
        )
    }

    /// SHA-256 over every low and target sample in order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pairs {
            for t in [&p.low, &p.gt] {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `low/NAME.png`, `gt/NAME.png` (16-bit) and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, spec: Option<&SynthSpec>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["low", "gt"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for p in &self.pairs {
            io::save_image(
                &p.low,
                dir.join("low").join(format!("{}.png", p.name)),
                Depth::Sixteen,
            )?;
            io::save_image(
                &p.gt,
                dir.join("gt").join(format!("{}.png", p.name)),
                Depth::Sixteen,
            )?;
        }
        if let Some(spec) = spec {
            let manifest = Manifest {
                count: self.len(),
                size: self.pairs.first().map_or(0, |p| p.gt.shape()[3]),
                spec: *spec,
                fingerprint: self.fingerprint(),
            };
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads every name present in both `low/` and `gt/`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let gt: std::collections::BTreeMap<String, _> =
            image_files(&dir.join("gt"))?.into_iter().collect();
        let mut pairs = Vec::new();
        for (name, low_path) in image_files(&dir.join("low"))? {
            if let Some(gt_path) = gt.get(&name) {
                let (low, gt) = (io::load_image(&low_path)?, io::load_image(gt_path)?);
                if low.shape() != gt.shape() {
                    return Err(Error::dim(format!(
                        "pair `{name}`: {:?} vs {:?}",
                        low.shape(),
                        gt.shape()
                    )));
                }
                pairs.push(Pair { name, low, gt });
            }
        }
        if pairs.is_empty() {
            return Err(Error::config(format!(
                "no matching low/gt images under {}",
                dir.display()
            )));
        }
        Ok(Self { pairs })
    }
}

/// `(stem, path)` of PNG/PPM files, sorted by name.
fn image_files(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}
