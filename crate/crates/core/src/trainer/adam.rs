//! Adam with decoupled weight decay.

use crate::encoder::ModelParams;
use crate::error::{DldError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    /// Number of updates this tensor has received.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Optimizer state aligned with [`ModelParams::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub slots: Vec<(String, Moments)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            slots: params
                .named()
                .into_iter()
                .map(|(name, t)| (name, Moments::zeros(t.numel())))
                .collect(),
        }
    }
}

/// One update of a flat parameter slice.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + weight_decay * param[i]);
    }
}

/// Updates every tensor that received a gradient. Tensors with `None`
/// (blocks skipped this step) are left untouched, moments included.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut named = params.named_mut();
    if named.len() != grads.len() || named.len() != state.slots.len() {
        return Err(DldError::contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            named.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for (((name, tensor), grad), (slot_name, moments)) in named.iter_mut().zip(grads).zip(state.slots.iter_mut()) {
        if name != slot_name || moments.m.len() != tensor.numel() {
            return Err(DldError::contract(format!("optimizer slot {slot_name} does not match {name}")));
        }
        if let Some(g) = grad {
            adam_update(tensor.data_mut(), g, moments, lr, weight_decay, cfg);
        }
    }
    Ok(())
}
