//! Paired augmentation: random crop, flips and quarter turns applied
//! identically to input and target.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One of the eight symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Orientation {
    pub const IDENTITY: Self = Self {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
    };

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut t = x.clone();
        if self.flip_h {
            t = flip(&t, false)?;
        }
        if self.flip_v {
            t = flip(&t, true)?;
        }
        for _ in 0..self.quarter_turns {
            t = rot90(&t)?;
        }
        Ok(t)
    }
}

/// Mirror along W (`vertical == false`) or along H.
pub fn flip<T: Real>(x: &Tensor<T>, vertical: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            let row = &plane[sy * w..(sy + 1) * w];
            if vertical {
                out.extend_from_slice(row);
            } else {
                out.extend(row.iter().rev());
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Quarter turn counter-clockwise: `out[y][x] = in[x][w−1−y]`.
pub fn rot90<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..w {
            for xx in 0..h {
                out.push(plane[xx * w + (w - 1 - y)]);
            }
        }
    }
    Tensor::from_vec(&[n, c, w, h], out)
}

/// Same random crop and orientation for both images.
pub fn augment_pair<R: Rng>(
    low: &Tensor<f32>,
    gt: &Tensor<f32>,
    crop: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (_, _, h, w) = low.dims4()?;
    if gt.shape() != low.shape() {
        return Err(Error::dim(format!(
            "pair shapes differ: {:?} vs {:?}",
            low.shape(),
            gt.shape()
        )));
    }
    if crop > h || crop > w {
        return Err(Error::config(format!(
            "crop {crop} larger than {h}×{w} training image"
        )));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let o = Orientation::random(rng);
    Ok((
        o.apply(&low.crop(top, left, crop, crop)?)?,
        o.apply(&gt.crop(top, left, crop, crop)?)?,
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn grid() -> Tensor<f32> {
        Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32)
    }

    #[test]
    fn four_turns_and_double_flips_are_identity() {
        let x = grid();
        let mut t = x.clone();
        for _ in 0..4 {
            t = rot90(&t).unwrap();
        }
        assert_eq!(t, x);
        assert_eq!(flip(&flip(&x, true).unwrap(), true).unwrap(), x);
        assert_eq!(flip(&flip(&x, false).unwrap(), false).unwrap(), x);
    }

    #[test]
    fn rotation_hand_case() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&x).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(flip(&x, false).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(flip(&x, true).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn pair_transform_is_shared() {
        let low = Tensor::from_fn(&[1, 3, 16, 16], |i| i as f32);
        let gt = low.map(|v| 2.0 * v + 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let (a, b) = augment_pair(&low, &gt, 8, &mut rng).unwrap();
            assert_eq!(a.shape(), &[1, 3, 8, 8]);
            assert_eq!(a.map(|v| 2.0 * v + 1.0), b);
        }
        assert!(augment_pair(&low, &gt, 32, &mut rng).is_err());
    }
}
