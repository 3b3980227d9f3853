use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::net::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates per tensor, in
/// [`ModelParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<DMatrix<f64>>,
    pub second: Vec<DMatrix<f64>>,
    pub step: u64,
    /// Learning rate of the most recent update.
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<DMatrix<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            lr: 0.0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let n = grad_tensors.len();
    if state.first.len() != n || state.second.len() != n {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, gradients have {n}",
            state.first.len()
        )));
    }
    for (((p, (name, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(&state.first)
        .zip(&state.second)
    {
        if p.shape() != g.shape() || m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::Shape(format!("tensor {name} shape mismatch")));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".to_string()));
    }

    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
