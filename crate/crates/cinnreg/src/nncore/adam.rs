//! Adam with L2-style weight decay and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as wd * theta before the moment
    /// updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer moments, one slot per parameter in registration order.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over `params` with bias correction. `lr` overrides the
/// config learning rate (so the schedule can drive it). Gradients are left
/// untouched; zero them before the next accumulation.
pub fn adam_step(
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    params: &mut [(String, &mut Param)],
) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        state.v = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::Parameter(format!(
            "adam state has {} slots, got {} params",
            state.m.len(),
            params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, (name, p)) in params.iter_mut().enumerate() {
        if p.grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..p.value.len() {
            let g = p.grad.data[i] + cfg.weight_decay * p.value.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Step decay: lr = base * factor^(epoch / decay_every).
pub fn lr_schedule(epoch: usize, base_lr: f64, decay_every: usize, factor: f64) -> f64 {
    base_lr * factor.powi((epoch / decay_every) as i32)
}
