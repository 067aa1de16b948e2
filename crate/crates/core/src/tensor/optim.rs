use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Error, Result};

/// Warm-up fraction of the one-cycle schedule.
const PCT_START: f64 = 0.3;
/// Initial lr is `max_lr / DIV_FACTOR`.
const DIV_FACTOR: f64 = 25.0;
/// Final lr is `max_lr / (DIV_FACTOR * FINAL_DIV_FACTOR)`.
const FINAL_DIV_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub max_lr: f32,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub momentum: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            max_lr: 0.005,
            batch_size: 16,
            epochs_per_stage: 30,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) {
            return contract(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if self.batch_size == 0 {
            return contract("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return contract(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// One-cycle learning rate at `step` of `total_steps`: cosine ramp from
/// `max_lr/25` to `max_lr` over the first 30% of steps, then cosine anneal
/// down to `max_lr/25e3`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f32) -> Result<f32> {
    if step >= total_steps {
        return contract(format!("lr step {step} outside schedule of {total_steps} steps"));
    }
    let max = max_lr as f64;
    let initial = max / DIV_FACTOR;
    let min = initial / FINAL_DIV_FACTOR;
    let up_end = PCT_START * total_steps as f64;
    let s = step as f64;
    let lr = if s <= up_end {
        cos_anneal(initial, max, s / up_end)
    } else {
        let span = (total_steps - 1) as f64 - up_end;
        cos_anneal(max, min, ((s - up_end) / span).min(1.0))
    };
    Ok(lr as f32)
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos())
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Velocity buffers are keyed by the position of a parameter in the slice
/// passed to [`Sgd::step`], so callers must keep the order stable.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), Vec::new());
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let v = &mut self.velocity[i];
            if v.len() != g.len() {
                *v = vec![0.0; g.len()];
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
