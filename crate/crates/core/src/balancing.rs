//! Auxiliary load-balancing penalties on the router.
//!
//! Both penalties are `½·(std/mean)²` (population std) of a per-expert usage
//! vector accumulated over a batch of states:
//!
//! * importance: soft routing mass `Imp_m = Σ_k softmax(Θ·s_k)_m`;
//! * load: expected noisy selections
//!   `Load_m = Σ_k Φ((g_m − max_{j≠m} g_j) / σ_noise)` with clean logits `g`:
//!   the probability that a fresh `N(0, σ_noise²)` draw added to expert `m`'s
//!   logit lifts it above the best competing logit.
//!
//! They act on router logits, never on expert outputs.

use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::policy::PolicyParams;

/// Stabilizer added to `mean(Load)`, which can approach zero. `mean(Imp)` is
/// `B/M` by construction and needs none.
pub const LOAD_CV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BalancingError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("noise std must be positive, got {0}")]
    NoiseStd(f64),
    #[error("balancing weight must be non-negative, got {0}")]
    Lambda(f64),
    #[error("batch has {got} columns, router expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per-expert importance and load over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGateStats {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    pub batch_size: usize,
}

/// Differentiable importance penalty from clean logits `[B × M]`.
pub fn importance_loss_var(graph: &mut Graph, logits: Var) -> Var {
    let pref = graph.softmax_rows(logits);
    let imp = graph.sum_cols(pref);
    graph.half_cv_squared(imp, 0.0)
}

/// Differentiable load penalty from clean logits `[B × M]`.
pub fn load_loss_var(graph: &mut Graph, logits: Var, noise_std: f64) -> Result<Var, BalancingError> {
    if !(noise_std > 0.0) {
        return Err(BalancingError::NoiseStd(noise_std));
    }
    if graph.value(logits).cols() < 2 {
        // a single expert takes every state: the load vector is constant
        let zero = graph.scale(logits, 0.0);
        return Ok(graph.sum(zero));
    }
    let load = load_var(graph, logits, noise_std)?;
    Ok(graph.half_cv_squared(load, LOAD_CV_EPS))
}

fn load_var(graph: &mut Graph, logits: Var, noise_std: f64) -> Result<Var, BalancingError> {
    let gap = graph.exclusive_max_gap(logits)?;
    let z = graph.scale(gap, 1.0 / noise_std);
    let p = graph.normal_cdf(z);
    Ok(graph.sum_cols(p))
}

/// `λ·(importance + load)` with the router noise scale `1/M`.
pub fn aux_loss_var(graph: &mut Graph, logits: Var, lambda: f64) -> Result<Var, BalancingError> {
    if !(lambda >= 0.0) {
        return Err(BalancingError::Lambda(lambda));
    }
    let m = graph.value(logits).cols();
    let imp = importance_loss_var(graph, logits);
    let load = load_loss_var(graph, logits, 1.0 / m as f64)?;
    let both = graph.add(imp, load)?;
    Ok(graph.scale(both, lambda))
}

fn bind_logits(params: &PolicyParams, batch: &Tensor, graph: &mut Graph) -> Result<(Var, Var), BalancingError> {
    if batch.rows() == 0 || batch.is_empty() {
        return Err(BalancingError::EmptyBatch);
    }
    if batch.cols() != params.state_dim() {
        return Err(BalancingError::Shape { expected: params.state_dim(), got: batch.cols() });
    }
    let router = graph.param(params.router().clone())?;
    let states = graph.constant(batch.clone())?;
    let logits = graph.affine(states, router, None)?;
    Ok((router, logits))
}

/// Loss value and its gradient with respect to the router matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub router_grad: Vec<f64>,
}

fn eval_with_grad(
    params: &PolicyParams,
    batch: &Tensor,
    build: impl FnOnce(&mut Graph, Var) -> Result<Var, BalancingError>,
) -> Result<LossWithGrad, BalancingError> {
    let mut g = Graph::new();
    let (router, logits) = bind_logits(params, batch, &mut g)?;
    let loss = build(&mut g, logits)?;
    g.backward(loss)?;
    let router_grad = g.grad(router).map_or_else(|| alloc::vec![0.0; params.router().len()], <[f64]>::to_vec);
    Ok(LossWithGrad { value: g.scalar(loss), router_grad })
}

pub fn importance_loss(params: &PolicyParams, batch: &Tensor) -> Result<f64, BalancingError> {
    Ok(importance_loss_with_grad(params, batch)?.value)
}

pub fn importance_loss_with_grad(params: &PolicyParams, batch: &Tensor) -> Result<LossWithGrad, BalancingError> {
    eval_with_grad(params, batch, |g, logits| Ok(importance_loss_var(g, logits)))
}

pub fn load_loss(params: &PolicyParams, batch: &Tensor, noise_std: f64) -> Result<f64, BalancingError> {
    Ok(load_loss_with_grad(params, batch, noise_std)?.value)
}

pub fn load_loss_with_grad(params: &PolicyParams, batch: &Tensor, noise_std: f64) -> Result<LossWithGrad, BalancingError> {
    eval_with_grad(params, batch, |g, logits| load_loss_var(g, logits, noise_std))
}

pub fn combined_aux_loss(params: &PolicyParams, batch: &Tensor, lambda: f64) -> Result<f64, BalancingError> {
    Ok(eval_with_grad(params, batch, |g, logits| aux_loss_var(g, logits, lambda))?.value)
}

/// Importance and load vectors for `batch` at the given router noise scale.
pub fn gate_stats(params: &PolicyParams, batch: &Tensor, noise_std: f64) -> Result<BatchGateStats, BalancingError> {
    if !(noise_std > 0.0) {
        return Err(BalancingError::NoiseStd(noise_std));
    }
    let mut g = Graph::new();
    let (_, logits) = bind_logits(params, batch, &mut g)?;
    let pref = g.softmax_rows(logits);
    let imp = g.sum_cols(pref);
    let importance = g.value(imp).values().to_vec();
    let load = if params.n_experts() < 2 {
        alloc::vec![batch.rows() as f64]
    } else {
        let l = load_var(&mut g, logits, noise_std)?;
        g.value(l).values().to_vec()
    };
    Ok(BatchGateStats { importance, load, batch_size: batch.rows() })
}
