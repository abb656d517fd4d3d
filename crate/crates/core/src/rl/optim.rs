use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradient, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; params.len()],
            second: vec![0.0; params.len()],
        }
    }
}

/// Clips `grads` to global norm `clip_norm` (if positive), then applies one
/// bias-corrected Adam update. Returns the gradient norm before clipping.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradient,
    state: &mut OptimizerState,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    for len in [grads.len(), state.first.len()] {
        if len != params.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                actual: len,
            });
        }
    }
    let norm = grads.norm();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let p = params.as_mut_slice();
    for (i, &g) in grads.as_slice().iter().enumerate() {
        let g = g * scale;
        let m = beta1 * state.first[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second[i] + (1.0 - beta2) * g * g;
        state.first[i] = m;
        state.second[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + eps);
        p[i] -= lr * (update + weight_decay * p[i]);
    }
    Ok(norm)
}
