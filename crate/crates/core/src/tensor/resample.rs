use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Linear interpolation weights along one axis: output sample `o` is
/// `Σ weight · input[index]` over `taps[o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    /// Half-pixel-centred bilinear weights (`align_corners = false`), with
    /// source coordinates clamped to the valid range at both borders.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect();
        Self { in_len, taps }
    }

    /// Box (area) weights: each output averages the input interval it covers.
    pub fn area(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let first = lo.floor() as usize;
                let last = ((hi.ceil() as usize).max(first + 1)).min(in_len);
                for i in first..last {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                }
                taps
            })
            .collect();
        Self { in_len, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// Applies `rows` along H and `cols` along W of an `N×C×H×W` tensor.
pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    rows: &AxisWeights,
    cols: &AxisWeights,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if rows.in_len != h || cols.in_len != w {
        return Err(Error::dim(format!(
            "resample expects {}×{} input, got {h}×{w}",
            rows.in_len, cols.in_len
        )));
    }
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let rt = cast_taps::<T>(rows);
    let ct = cast_taps::<T>(cols);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut tmp = vec![T::zero(); h * ow];
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (o, taps) in ct.iter().enumerate() {
                tmp[y * ow + o] = taps.iter().map(|&(i, wt)| src[i] * wt).sum();
            }
        }
        for taps in &rt {
            for xo in 0..ow {
                out.push(taps.iter().map(|&(i, wt)| tmp[i * ow + xo] * wt).sum());
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub(crate) fn backward<T: Real>(
    in_shape: &[usize],
    rows: &AxisWeights,
    cols: &AxisWeights,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (rows.in_len, cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let rt = cast_taps::<T>(rows);
    let ct = cast_taps::<T>(cols);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    let mut gtmp = vec![T::zero(); h * ow];
    for (gplane, xplane) in gy
        .data()
        .chunks_exact(oh * ow)
        .zip(gx.chunks_exact_mut(h * w))
    {
        gtmp.fill(T::zero());
        for (yo, taps) in rt.iter().enumerate() {
            for &(i, wt) in taps {
                for xo in 0..ow {
                    gtmp[i * ow + xo] += wt * gplane[yo * ow + xo];
                }
            }
        }
        for y in 0..h {
            let dst = &mut xplane[y * w..(y + 1) * w];
            for (o, taps) in ct.iter().enumerate() {
                let g = gtmp[y * ow + o];
                for &(i, wt) in taps {
                    dst[i] += wt * g;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

fn cast_taps<T: Real>(a: &AxisWeights) -> Vec<Vec<(usize, T)>> {
    a.taps
        .iter()
        .map(|t| t.iter().map(|&(i, w)| (i, T::from_f64(w))).collect())
        .collect()
}
