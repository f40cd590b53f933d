//! The interpretable actor: a bias-free linear router over `M` bias-free
//! linear Gaussian experts, gated with TOP₁ applied after softmax.
//!
//! Actions are the expert's Gaussian sample squashed through `tanh`, so the
//! log-density carries the usual change-of-variables correction. The linear
//! pre-squash map is what interpretation reports show.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::math::tanh;
use crate::autodiff::{argmax, gaussian_log_density, softmax_into, AutodiffError, Graph, Tensor, Var};
use crate::rng::standard_normal;

/// Keeps `log(1 − tanh² + ε)` finite when the pre-squash sample saturates.
pub const TANH_LOG_EPS: f64 = 1e-6;
pub const DEFAULT_LOG_STD_BOUNDS: (f64, f64) = (-5.0, 2.0);
const MAX_ABS_ACTION: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    n_experts: usize,
    state_dim: usize,
    action_dim: usize,
    top_k: usize,
    log_std_bounds: (f64, f64),
    router: Tensor,
    expert_weights: Vec<Tensor>,
    expert_log_std: Vec<Tensor>,
}

/// Result of routing one state.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub preference: Vec<f64>,
    pub selected: usize,
    pub one_hot: Vec<f64>,
    /// Router logits after the training-time perturbation, when one was drawn.
    pub noisy_logits: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticAction {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub gate: GateDecision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub active: usize,
    pub total: usize,
}

impl PolicyParams {
    /// Router and expert weights i.i.d. uniform in `±1/√n_s`, log-σ at 0.
    pub fn new_random<R: Rng + ?Sized>(
        n_experts: usize,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(n_experts, state_dim, action_dim)?;
        let bound = 1.0 / libm::sqrt(state_dim as f64);
        for v in p.router.values_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for w in &mut p.expert_weights {
            for v in w.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(n_experts: usize, state_dim: usize, action_dim: usize) -> Result<Self, PolicyError> {
        if n_experts == 0 || state_dim == 0 || action_dim == 0 {
            return Err(PolicyError::Invalid("expert count and dimensions must be >= 1"));
        }
        Ok(Self {
            n_experts,
            state_dim,
            action_dim,
            top_k: 1,
            log_std_bounds: DEFAULT_LOG_STD_BOUNDS,
            router: Tensor::zeros(&[n_experts, state_dim]),
            expert_weights: vec![Tensor::zeros(&[action_dim, state_dim]); n_experts],
            expert_log_std: vec![Tensor::zeros(&[action_dim]); n_experts],
        })
    }

    /// Assembles parameters from explicit tensors and validates every shape.
    pub fn from_parts(
        router: Tensor,
        expert_weights: Vec<Tensor>,
        expert_log_std: Vec<Tensor>,
        top_k: usize,
        log_std_bounds: (f64, f64),
    ) -> Result<Self, PolicyError> {
        let n_experts = router.rows();
        let state_dim = router.cols();
        let action_dim = expert_weights.first().map_or(0, Tensor::rows);
        let p = Self {
            n_experts,
            state_dim,
            action_dim,
            top_k,
            log_std_bounds,
            router,
            expert_weights,
            expert_log_std,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let (m, ns, na) = (self.n_experts, self.state_dim, self.action_dim);
        if m == 0 || ns == 0 || na == 0 {
            return Err(PolicyError::Invalid("expert count and dimensions must be >= 1"));
        }
        if self.router.shape() != [m, ns] {
            return Err(PolicyError::Invalid("router must be M × n_s"));
        }
        if self.expert_weights.len() != m || self.expert_log_std.len() != m {
            return Err(PolicyError::Invalid("need one weight matrix and one log-std vector per expert"));
        }
        if self.expert_weights.iter().any(|w| w.shape() != [na, ns]) {
            return Err(PolicyError::Invalid("expert weights must be n_a × n_s"));
        }
        let (lo, hi) = self.log_std_bounds;
        if !(lo < hi) {
            return Err(PolicyError::Invalid("log-std bounds must satisfy lo < hi"));
        }
        for ls in &self.expert_log_std {
            if ls.len() != na {
                return Err(PolicyError::Invalid("expert log-std must have n_a entries"));
            }
            if ls.values().iter().any(|&v| !(lo..=hi).contains(&v)) {
                return Err(PolicyError::Invalid("expert log-std outside bounds"));
            }
        }
        if self.top_k == 0 || self.top_k > m {
            return Err(PolicyError::Invalid("top_k must lie in 1..=M"));
        }
        if !self.router.is_finite() || self.expert_weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::Invalid("non-finite weights"));
        }
        Ok(())
    }

    pub fn with_top_k(mut self, k: usize) -> Result<Self, PolicyError> {
        self.top_k = k;
        self.validate()?;
        Ok(self)
    }

    pub fn with_log_std_bounds(mut self, bounds: (f64, f64)) -> Result<Self, PolicyError> {
        self.log_std_bounds = bounds;
        self.clamp_log_std();
        self.validate()?;
        Ok(self)
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn log_std_bounds(&self) -> (f64, f64) {
        self.log_std_bounds
    }

    pub fn router(&self) -> &Tensor {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Tensor {
        &mut self.router
    }

    pub fn expert_weights(&self, m: usize) -> &Tensor {
        &self.expert_weights[m]
    }

    pub fn expert_weights_mut(&mut self, m: usize) -> &mut Tensor {
        &mut self.expert_weights[m]
    }

    pub fn expert_log_std(&self, m: usize) -> &Tensor {
        &self.expert_log_std[m]
    }

    /// Sets expert `m`'s log-σ, clamped into the bounds.
    pub fn set_expert_log_std(&mut self, m: usize, values: &[f64]) -> Result<(), PolicyError> {
        check_len("log_std", self.action_dim, values.len())?;
        let (lo, hi) = self.log_std_bounds;
        for (dst, &v) in self.expert_log_std[m].values_mut().iter_mut().zip(values) {
            *dst = v.clamp(lo, hi);
        }
        Ok(())
    }

    /// Tensors in optimizer order: router, expert weights, expert log-σ.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.router];
        out.extend(self.expert_weights.iter());
        out.extend(self.expert_log_std.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.router];
        out.extend(self.expert_weights.iter_mut());
        out.extend(self.expert_log_std.iter_mut());
        out
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = self.log_std_bounds;
        for ls in &mut self.expert_log_std {
            for v in ls.values_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Clean router logits `Θ·s`.
    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_len("state", self.state_dim, state.len())?;
        Ok((0..self.n_experts).map(|m| dot(self.router.row(m), state)).collect())
    }

    /// Pre-squash output `θ_m·s` of expert `m`.
    pub fn expert_output(&self, m: usize, state: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_len("state", self.state_dim, state.len())?;
        let w = &self.expert_weights[m];
        Ok((0..self.action_dim).map(|j| dot(w.row(j), state)).collect())
    }

    /// TOP₁(softmax(Θ·s + ε)) with `ε_i ~ N(0, 1/M²)` when `noise` is given.
    pub fn route<R: Rng + ?Sized>(&self, state: &[f64], noise: Option<&mut R>) -> Result<GateDecision, PolicyError> {
        let mut logits = self.logits(state)?;
        let noisy_logits = match noise {
            Some(rng) => {
                let std = 1.0 / self.n_experts as f64;
                for l in &mut logits {
                    *l += std * standard_normal(rng);
                }
                Some(logits.clone())
            }
            None => None,
        };
        let mut preference = vec![0.0; self.n_experts];
        softmax_into(&logits, &mut preference);
        let selected = argmax(&preference);
        let mut one_hot = vec![0.0; self.n_experts];
        one_hot[selected] = 1.0;
        Ok(GateDecision { preference, selected, one_hot, noisy_logits })
    }

    /// Noise-free routing.
    pub fn route_clean(&self, state: &[f64]) -> Result<GateDecision, PolicyError> {
        self.route::<rand_chacha::ChaCha8Rng>(state, None)
    }

    fn gate_weights(&self, gate: &GateDecision) -> Vec<f64> {
        if self.top_k == 1 {
            gate.one_hot.clone()
        } else {
            top_k_weights(&gate.preference, self.top_k)
        }
    }

    fn mixed_linear(&self, weights: &[f64], state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; self.action_dim];
        let mut log_std = vec![0.0; self.action_dim];
        for (m, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let e = &self.expert_weights[m];
            for j in 0..self.action_dim {
                mean[j] += w * dot(e.row(j), state);
                log_std[j] += w * self.expert_log_std[m].values()[j];
            }
        }
        (mean, log_std)
    }

    /// Samples a squashed action from the routed expert (gate noise on).
    pub fn act_stochastic<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<StochasticAction, PolicyError> {
        let gate = self.route(state, Some(&mut *rng))?;
        let weights = self.gate_weights(&gate);
        let (mean, log_std) = self.mixed_linear(&weights, state);
        let pre: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(&mu, &ls)| mu + libm::exp(ls) * standard_normal(rng))
            .collect();
        let log_prob = squashed_log_prob(&pre, &mean, &log_std);
        let action = pre.iter().map(|&u| tanh(u).clamp(-MAX_ABS_ACTION, MAX_ABS_ACTION)).collect();
        Ok(StochasticAction { action, log_prob, gate })
    }

    /// `tanh(θ_selected·s)` with clean routing; standard deviations unused.
    pub fn act_deterministic(&self, state: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let gate = self.route_clean(state)?;
        if self.top_k == 1 {
            let out = self.expert_output(gate.selected, state)?;
            return Ok(out.into_iter().map(tanh).collect());
        }
        let weights = self.gate_weights(&gate);
        let (mean, _) = self.mixed_linear(&weights, state);
        Ok(mean.into_iter().map(tanh).collect())
    }

    /// `(N_act, N_tot)`; the router counts toward both unless excluded.
    pub fn count_params(&self, include_router: bool) -> ParamCount {
        let router = if include_router { self.n_experts * self.state_dim } else { 0 };
        let expert = self.action_dim * self.state_dim + self.action_dim;
        ParamCount { active: router + self.top_k * expert, total: router + self.n_experts * expert }
    }

    /// Records the parameters on `graph` for batched, differentiable sampling.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<BoundPolicy, PolicyError> {
        if self.top_k != 1 {
            return Err(PolicyError::Invalid("differentiable sampling supports top_k = 1 only"));
        }
        let (m, ns, na) = (self.n_experts, self.state_dim, self.action_dim);
        let mut stacked = Vec::with_capacity(m * na * ns);
        for w in &self.expert_weights {
            stacked.extend_from_slice(w.values());
        }
        let mut log_std = Vec::with_capacity(m * na);
        for ls in &self.expert_log_std {
            log_std.extend_from_slice(ls.values());
        }
        let leaf = |g: &mut Graph, t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let router = leaf(graph, self.router.clone())?;
        let experts = leaf(graph, Tensor::matrix(m * na, ns, stacked)?)?;
        let log_std = leaf(graph, Tensor::matrix(m, na, log_std)?)?;
        Ok(BoundPolicy { router, experts, log_std, n_experts: m, action_dim: na, state_dim: ns })
    }
}

/// Graph handles for a bound [`PolicyParams`].
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub router: Var,
    pub experts: Var,
    pub log_std: Var,
    n_experts: usize,
    action_dim: usize,
    state_dim: usize,
}

/// Differentiable batch of squashed samples.
#[derive(Clone, Debug)]
pub struct SampledBatch {
    /// `[B × n_a]`, squashed.
    pub action: Var,
    /// `[B × 1]`
    pub log_prob: Var,
    /// Clean router logits `[B × M]`.
    pub logits: Var,
    pub selected: Vec<usize>,
}

impl BoundPolicy {
    /// Reparameterized batch sample.
    ///
    /// `gate_noise` (`[B × M]`, already scaled) perturbs the logits before the
    /// gate; `eps` (`[B × n_a]`) are the standard normal draws. The gate is
    /// one-hot in value and passes its gradient straight to the softmax, so
    /// every router row receives signal from the actor loss.
    pub fn sample(
        &self,
        graph: &mut Graph,
        states: Var,
        gate_noise: Option<&Tensor>,
        eps: &Tensor,
    ) -> Result<SampledBatch, PolicyError> {
        if graph.value(states).cols() != self.state_dim {
            return Err(PolicyError::Shape { what: "states", expected: self.state_dim, got: graph.value(states).cols() });
        }
        let logits = graph.affine(states, self.router, None)?;
        let gated_logits = match gate_noise {
            Some(n) => {
                let nv = graph.constant(n.clone())?;
                graph.add(logits, nv)?
            }
            None => logits,
        };
        let pref = graph.softmax_rows(gated_logits);
        let gate = graph.straight_through_top1(pref);
        self.sample_gated(graph, states, logits, gate, eps)
    }

    /// Squashed sample given an explicit `[B × M]` gate.
    pub fn sample_gated(
        &self,
        graph: &mut Graph,
        states: Var,
        logits: Var,
        gate: Var,
        eps: &Tensor,
    ) -> Result<SampledBatch, PolicyError> {
        let batch = graph.value(states).rows();
        if eps.rows() != batch || eps.cols() != self.action_dim {
            return Err(PolicyError::Shape { what: "eps", expected: batch * self.action_dim, got: eps.len() });
        }
        let selected = (0..batch).map(|r| argmax(graph.value(gate).row(r))).collect();
        let all_means = graph.affine(states, self.experts, None)?;
        let mean = graph.mix(gate, all_means)?;
        let log_std = graph.gated_table(gate, self.log_std)?;
        let sigma = graph.exp(log_std);
        let eps_v = graph.constant(eps.clone())?;
        let spread = graph.mul(sigma, eps_v)?;
        let pre = graph.add(mean, spread)?;
        let base = graph.gaussian_log_prob(pre, mean, log_std)?;
        let action = graph.tanh(pre);
        let sq = graph.square(action);
        let neg = graph.scale(sq, -1.0);
        let inside = graph.add_scalar(neg, 1.0 + TANH_LOG_EPS);
        let log_det = graph.ln(inside)?;
        let correction = graph.sum_rows(log_det);
        let log_prob = graph.sub(base, correction)?;
        Ok(SampledBatch { action, log_prob, logits, selected })
    }

    /// Splits the accumulated gradients back into [`PolicyParams::tensors`] order.
    pub fn grads<'g>(&self, graph: &'g Graph) -> Vec<Option<&'g [f64]>> {
        let (m, na, ns) = (self.n_experts, self.action_dim, self.state_dim);
        let mut out = Vec::with_capacity(2 * m + 1);
        out.push(graph.grad(self.router));
        let experts = graph.grad(self.experts);
        for k in 0..m {
            out.push(experts.map(|g| &g[k * na * ns..(k + 1) * na * ns]));
        }
        let ls = graph.grad(self.log_std);
        for k in 0..m {
            out.push(ls.map(|g| &g[k * na..(k + 1) * na]));
        }
        out
    }
}

/// Renormalized TOP_k mask of a preference vector (lowest index wins ties).
pub fn top_k_weights(preference: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..preference.len()).collect();
    order.sort_by(|&a, &b| preference[b].partial_cmp(&preference[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; preference.len()];
    let kept = &order[..k.min(order.len())];
    let total: f64 = kept.iter().map(|&i| preference[i]).sum();
    for &i in kept {
        out[i] = preference[i] / total;
    }
    out
}

/// Log-density of `tanh(u)` where `u ~ N(mean, exp(log_std)²)`.
pub fn squashed_log_prob(pre_squash: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let base = gaussian_log_density(pre_squash, mean, log_std);
    let correction: f64 = pre_squash
        .iter()
        .map(|&u| {
            let a = tanh(u);
            libm::log(1.0 - a * a + TANH_LOG_EPS)
        })
        .sum();
    base - correction
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), PolicyError> {
    if expected != got {
        return Err(PolicyError::Shape { what, expected, got });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
