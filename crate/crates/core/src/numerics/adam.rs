use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter for decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer update at learning rate `lr` (overrides `config.lr`, so
/// schedules can drive it). Parameters without a gradient are treated as
/// having a zero gradient and still receive weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Vec<f32>>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(LabError::Shape {
            op: "adam_step",
            expected: vec![state.first.len()],
            got: vec![params.len(), grads.len()],
        });
    }
    for (p, (g, m)) in params.iter().zip(grads.iter().zip(&state.first)) {
        if m.len() != p.len() || g.as_ref().is_some_and(|g| g.len() != p.len()) {
            return Err(LabError::Shape {
                op: "adam_step",
                expected: p.shape().to_vec(),
                got: vec![g.as_ref().map_or(0, Vec::len), m.len()],
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let g = grads[i].as_deref();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]) as f64;
            let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
            let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / bc1) / ((vj / bc2).sqrt() + c.eps) + c.weight_decay * *w as f64;
            *w = (*w as f64 - lr * update) as f32;
        }
    }
    Ok(())
}
