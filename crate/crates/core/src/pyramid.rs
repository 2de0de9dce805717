//! Laplace pyramid codec.
//!
//! Two decompositions share one reconstruction:
//!
//! * [`CodecMode::Exact`] builds each band as the difference between a
//!   Gaussian level and the upsampled next level, so
//!   `reconstruct(decompose(x)) == x` up to rounding.
//! * [`CodecMode::Literal`] blurs before every downsample and takes
//!   differences of Gaussians at matching resolution. Reconstruction through
//!   the same upsample-and-add recursion is lossy.
//!
//! Band `k` (1-based) has spatial size `H/2^(k-1) × W/2^(k-1)`; the last band
//! carries the low-frequency residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PadMode, Padding, Real, Tape, Tensor, Var};

/// Default pyramid depth.
pub const DEFAULT_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    #[default]
    Exact,
    /// Difference-of-Gaussians bands; not perfect reconstruction.
    #[serde(rename = "paper-literal", alias = "literal")]
    Literal,
}

impl std::str::FromStr for CodecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "paper-literal" | "literal" => Ok(Self::Literal),
            other => Err(Error::config(format!("unknown codec mode `{other}`"))),
        }
    }
}

/// Separable binomial 5-tap low-pass filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct GaussianKernel;

impl GaussianKernel {
    pub const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

    /// Depthwise `C×1×5×5` weight for `channels` channels.
    pub fn weight<T: Real>(channels: usize) -> Tensor<T> {
        Tensor::from_fn(&[channels, 1, 5, 5], |i| {
            let (r, c) = ((i % 25) / 5, i % 5);
            T::from_f64(Self::TAPS[r] * Self::TAPS[c])
        })
    }
}

/// Bands recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Bands {
    pub vars: Vec<Var>,
    pub mode: CodecMode,
}

impl Bands {
    pub fn levels(&self) -> usize {
        self.vars.len()
    }

    /// Lowest-frequency band.
    pub fn coarsest(&self) -> Var {
        *self.vars.last().expect("pyramid has at least two bands")
    }

    pub fn to_stack<T: Real>(&self, tape: &Tape<T>) -> PyramidStack<T> {
        PyramidStack {
            bands: self.vars.iter().map(|&v| tape.value(v).clone()).collect(),
            mode: self.mode,
        }
    }
}

/// Materialised pyramid bands `[m¹ … m^K]`, each `N×C×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidStack<T> {
    bands: Vec<Tensor<T>>,
    mode: CodecMode,
}

impl<T: Real> PyramidStack<T> {
    /// Validates the dyadic shape law before accepting `bands`.
    pub fn new(bands: Vec<Tensor<T>>, mode: CodecMode) -> Result<Self> {
        check_shapes(bands.iter().map(Tensor::shape))?;
        Ok(Self { bands, mode })
    }

    pub fn decompose(image: &Tensor<T>, levels: usize, mode: CodecMode) -> Result<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone())?;
        let bands = decompose(&mut tape, x, levels, mode)?;
        Ok(bands.to_stack(&tape))
    }

    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bands = self.bind(&mut tape)?;
        let out = reconstruct(&mut tape, &bands)?;
        Ok(tape.value(out).clone())
    }

    /// Pushes every band onto `tape` as a constant.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bands> {
        Ok(Bands {
            vars: self
                .bands
                .iter()
                .map(|b| tape.constant(b.clone()))
                .collect::<Result<_>>()?,
            mode: self.mode,
        })
    }

    pub fn bands(&self) -> &[Tensor<T>] {
        &self.bands
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn levels(&self) -> usize {
        self.bands.len()
    }

    /// Band-wise sum with another stack of identical layout.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.levels() != other.levels() {
            return Err(Error::dim("pyramid level count mismatch"));
        }
        let bands = self
            .bands
            .iter()
            .zip(&other.bands)
            .map(|(a, b)| a.zip_map(b, |x, y| x + y))
            .collect::<Result<_>>()?;
        Ok(Self {
            bands,
            mode: self.mode,
        })
    }
}

fn check_shapes<'a>(mut shapes: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let first = shapes
        .next()
        .ok_or_else(|| Error::dim("pyramid needs at least one band"))?;
    let [n, c, h, w] = *first else {
        return Err(Error::dim(format!("band must be N×C×H×W, got {first:?}")));
    };
    for (k, s) in shapes.enumerate() {
        let f = 1 << (k + 1);
        if s != [n, c, h / f, w / f] || h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!(
                "band {} has shape {s:?}, expected {:?}",
                k + 2,
                [n, c, h / f, w / f]
            )));
        }
    }
    Ok(())
}

/// Separable 5-tap binomial blur with reflect padding; shape preserving.
pub fn gaussian_blur<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::dim(format!(
            "gaussian blur needs at least 3×3, got {h}×{w}"
        )));
    }
    let k = tape.constant(GaussianKernel::weight(c))?;
    tape.conv2d(
        x,
        k,
        None,
        ConvSpec::new(1, Padding::uniform(PadMode::Reflect, 2), c),
    )
}

/// Splits `x` into `levels` bands.
pub fn decompose<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    levels: usize,
    mode: CodecMode,
) -> Result<Bands> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if levels < 2 {
        return Err(Error::config(format!(
            "pyramid needs at least 2 levels, got {levels}"
        )));
    }
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 {
        return Err(Error::dim(format!(
            "{h}×{w} is not divisible by 2^{} for {levels} levels",
            levels - 1
        )));
    }
    let mut vars = Vec::with_capacity(levels);
    match mode {
        CodecMode::Exact => {
            let mut g = x;
            for _ in 1..levels {
                let blurred = gaussian_blur(tape, g)?;
                let next = tape.downsample2(blurred)?;
                let up = tape.upsample2(next)?;
                vars.push(tape.sub(g, up)?);
                g = next;
            }
            vars.push(g);
        }
        CodecMode::Literal => {
            // I_G¹ = g∗I ; I_G^k = g∗resize(I_G^{k-1}, ↓2)
            let mut prev = gaussian_blur(tape, x)?;
            vars.push(tape.sub(x, prev)?);
            for k in 2..=levels {
                let down = tape.downsample2(prev)?;
                if k == levels {
                    vars.push(down);
                    break;
                }
                let g = gaussian_blur(tape, down)?;
                vars.push(tape.sub(down, g)?);
                prev = g;
            }
        }
    }
    Ok(Bands { vars, mode })
}

/// Coarse-to-fine recursion `m̂^K = m^K`, `m̂^k = m^k + up(m̂^{k+1})`.
pub fn reconstruct<T: Real>(tape: &mut Tape<T>, bands: &Bands) -> Result<Var> {
    check_shapes(bands.vars.iter().map(|&v| tape.shape(v)))?;
    let mut acc = bands.coarsest();
    for &band in bands.vars.iter().rev().skip(1) {
        let up = tape.upsample2(acc)?;
        acc = tape.add(band, up)?;
    }
    Ok(acc)
}

/// Full-resolution view of band `k` (0-based): `k` bilinear doublings.
pub fn upsample_band<T: Real>(tape: &mut Tape<T>, band: Var, k: usize) -> Result<Var> {
    let mut v = band;
    for _ in 0..k {
        v = tape.upsample2(v)?;
    }
    Ok(v)
}

/// Channel stack `[m¹, Up(m²), …, Up(m^K), m¹_l, …, Up(m^K_l)]` at full
/// resolution; `2·K·C` channels.
pub fn stack_bands<T: Real>(tape: &mut Tape<T>, m: &Bands, ml: &Bands) -> Result<Var> {
    if m.levels() != ml.levels() {
        return Err(Error::dim(format!(
            "cannot stack {} levels with {} levels",
            m.levels(),
            ml.levels()
        )));
    }
    if tape.shape(m.vars[0]) != tape.shape(ml.vars[0]) {
        return Err(Error::dim(format!(
            "stacked pyramids differ in resolution: {:?} vs {:?}",
            tape.shape(m.vars[0]),
            tape.shape(ml.vars[0])
        )));
    }
    let mut parts = Vec::with_capacity(2 * m.levels());
    for bands in [m, ml] {
        for (k, &b) in bands.vars.iter().enumerate() {
            parts.push(upsample_band(tape, b, k)?);
        }
    }
    tape.concat(&parts)
}
