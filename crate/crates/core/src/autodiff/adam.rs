use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::AutodiffError;

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self, AutodiffError> {
        if !(lr > 0.0) {
            return Err(AutodiffError::Usage { detail: "learning rate must be positive" });
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_tensors(lr: f64, params: &[&Tensor]) -> Result<Self, AutodiffError> {
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        Self::new(lr, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A `None` gradient counts as zero.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    state: &mut OptimizerState,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(AutodiffError::Shape {
            op: "adam_step",
            detail: alloc::format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let expected = state.first[i].len();
        if p.len() != expected || g.is_some_and(|g| g.len() != expected) {
            return Err(AutodiffError::Shape {
                op: "adam_step",
                detail: alloc::format!("slot {} expects {} values", i, expected),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        let values = p.values_mut();
        for k in 0..values.len() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values[k] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
