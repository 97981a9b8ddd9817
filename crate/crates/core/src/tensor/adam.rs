use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// Non-finite gradients abort the step and leave parameters untouched.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for id in params.ids() {
        if !params.grad(id).is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
        }
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, id) in params.ids().enumerate() {
        let (value, grad) = params.value_and_grad_mut(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((p, g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    for id in params.ids() {
        if !params.value(id).is_finite() {
            return Err(Error::NonFinite(format!("parameter `{}` after update", params.name(id))));
        }
    }
    Ok(())
}
