//! Adam with bias correction, cosine annealing and global-norm clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// `0.5·lr0·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if step > total {
        return Err(Error::usage(format!(
            "step {step} beyond schedule length {total}"
        )));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(0.5 * lr0 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut WeightStore<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: WeightStore<f32>,
    v: WeightStore<f32>,
}

impl Adam {
    pub fn new(params: &WeightStore<f32>) -> Self {
        let zeros = |s: &WeightStore<f32>| {
            let mut z = WeightStore::new();
            for (k, t) in s.iter() {
                z.insert(k, Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter; each must have a gradient.
    pub fn step(
        &mut self,
        params: &mut WeightStore<f32>,
        grads: &WeightStore<f32>,
        lr: f64,
    ) -> Result<()> {
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::usage(format!("no gradient for `{name}`")))?;
            if g.shape() != params.get(name).expect("own name").shape() {
                return Err(Error::dim(format!("gradient shape mismatch for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self.m.get_mut(name).expect("moments mirror params");
            let v = self.v.get_mut(name).expect("moments mirror params");
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data_mut()[i] -= update as f32;
            }
        }
        Ok(())
    }
}
