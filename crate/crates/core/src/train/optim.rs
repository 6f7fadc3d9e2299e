use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Upper clamp of the LAMB trust ratio.
pub const MAX_TRUST: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Adam direction rescaled per tensor by `‖w‖ / ‖update‖`.
    Lamb,
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    base_lr * (step as f64 / warmup_steps.max(1) as f64).min(1.0)
}

/// Bias-corrected first and second moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Optimizer {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(kind: OptimizerKind, params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<Tensor<f32>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Optimizer { kind, steps: 0, v: m.clone(), m }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every tensor in `params` against the matching gradient.
    pub fn update(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer", format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("optimizer", format!("slot {i}: param {:?}, grad {:?}, moments {:?}", p.shape(), g.shape(), self.m[i].shape())));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let mut dir = Vec::with_capacity(g.numel());
            for ((gi, mi), vi) in g.data().iter().zip(m.data_mut()).zip(v.data_mut()) {
                let gi = *gi as f64;
                let mn = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
                let vn = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                dir.push((mn / c1) / ((vn / c2).sqrt() + ADAM_EPS));
            }
            let ratio = match self.kind {
                OptimizerKind::Adam => 1.0,
                OptimizerKind::Lamb => trust_ratio(p.data(), &dir),
            };
            let step = lr * ratio;
            for (w, d) in p.data_mut().iter_mut().zip(&dir) {
                *w = (*w as f64 - step * d) as f32;
            }
        }
        Ok(())
    }

    /// Stores the moments under `{prefix}m.{i}`, `{prefix}v.{i}` and the step count.
    pub fn save(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.push(format!("{prefix}steps"), Tensor::new([2], split_u64(self.steps))?)?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.push(format!("{prefix}m.{i}"), m.clone())?;
            ck.push(format!("{prefix}v.{i}"), v.clone())?;
        }
        Ok(())
    }

    /// Restores state written by [`Optimizer::save`]; shapes must match this optimizer.
    pub fn load(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        let steps = ck.require(&format!("{prefix}steps"))?;
        self.steps = join_u64(steps.data());
        for (i, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            for (slot, name) in [(m, format!("{prefix}m.{i}")), (v, format!("{prefix}v.{i}"))] {
                let t = ck.require(&name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::CheckpointMismatch { name, detail: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()) });
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

/// `‖w‖ / ‖update‖` clamped to `[0, MAX_TRUST]`, or 1 when either norm vanishes.
pub fn trust_ratio(w: &[f32], update: &[f64]) -> f64 {
    let wn = w.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let un = update.iter().map(|x| x * x).sum::<f64>().sqrt();
    if wn == 0.0 || un == 0.0 {
        1.0
    } else {
        (wn / un).clamp(0.0, MAX_TRUST)
    }
}

/// Counters are stored as two 16-bit halves, each exact in `f32`.
pub(crate) fn split_u64(v: u64) -> Vec<f32> {
    assert!(v < 1 << 32, "counter overflow");
    vec![(v >> 16) as f32, (v & 0xffff) as f32]
}

pub(crate) fn join_u64(d: &[f32]) -> u64 {
    ((d[0] as u64) << 16) | d[1] as u64
}
