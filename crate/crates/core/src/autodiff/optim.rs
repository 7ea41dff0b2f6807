use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{contract, shape_err, Error, Result};

pub const DEFAULT_CLIP_NORM: f64 = 100.0;
pub const WORLD_MODEL_LR: f64 = 6e-4;
pub const BEHAVIOR_LR: f64 = 8e-5;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm measured before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return contract(format!("max_norm must be positive, got {max_norm}"));
    }
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], learning_rate: f64, clip_norm: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            learning_rate,
            clip_norm,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if !(state.learning_rate > 0.0) {
        return contract(format!("learning rate must be positive, got {}", state.learning_rate));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return shape_err(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return shape_err(format!(
                "adam: param {i} has shape {:?}, grad {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}; update refused")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = state.learning_rate;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            md[k] = BETA1 * md[k] + (1.0 - BETA1) * gd[k];
            vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gd[k] * gd[k];
            let mhat = md[k] / bc1;
            let vhat = vd[k] / bc2;
            pd[k] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}

/// Adam with global-norm clipping applied before each step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &[Tensor], learning_rate: f64, clip_norm: f64) -> Self {
        Self {
            state: OptimizerState::new(params, learning_rate, clip_norm),
        }
    }

    /// Clips, then updates. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], mut grads: Vec<Tensor>) -> Result<f64> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}; update refused")));
        }
        let norm = clip_global_norm(&mut grads, self.state.clip_norm)?;
        adam_step(params, &grads, &mut self.state)?;
        Ok(norm)
    }
}
