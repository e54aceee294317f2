//! Bias-corrected Adam over plain tensors.

use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Optimizer hyperparameters. Defaults follow the standard recommendation
/// with the training learning rate of 0.001.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    /// Zero-initialized state matching the given parameter shapes.
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update over a parameter group. `grads[i]` of `None` skips
/// parameter `i` entirely (its moments are untouched); a zero gradient
/// updates the moments but leaves the parameter bit-identical at fresh
/// state, since the update direction is exactly zero.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "adam over {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gradient shape {:?} vs parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gi;
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
