//! Adam over a flat parameter slice, plus the cosine learning-rate schedule
//! the trainers share.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("moment shape {have} does not match parameter count {want}")]
    ShapeMismatch { have: usize, want: usize },
}

/// Bias-corrected first-order optimizer state for one flat parameter bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One standard bias-corrected update, in place. Deterministic given inputs.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), AdamError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdamError::ShapeMismatch { have: state.m.len(), want: params.len() });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Cosine decay from `base` to `floor` over `total` iterations.
pub fn cosine_lr(base: f64, floor: f64, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (iteration.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}
