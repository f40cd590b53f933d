//! Deterministic policy evaluation, the uniform-random baseline and
//! multi-seed aggregation.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvError, Environment};
use crate::policy::{ParamCount, PolicyError, PolicyParams};
use crate::rng::{self, uniform};

pub const DEFAULT_EPISODES: usize = 100;
pub const DEFAULT_HORIZON: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("policy expects {policy} state / {policy_actions} action dims, environment has {env} / {env_actions}")]
    Mismatch { policy: usize, policy_actions: usize, env: usize, env_actions: usize },
    #[error("n_episodes and horizon must be positive")]
    Empty,
    #[error("aggregate mismatch: {0}")]
    Inconsistent(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Episodic returns of one evaluation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFragment {
    pub seed: u64,
    pub horizon: usize,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    /// Steps routed to each expert; empty for the random baseline.
    pub expert_usage: Vec<u64>,
}

fn run_episodes<E: Environment>(
    env: &mut E,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    mut act: impl FnMut(&[f64]) -> Result<Vec<f64>, EvalError>,
) -> Result<(Vec<f64>, Vec<usize>, usize), EvalError> {
    if n_episodes == 0 || horizon == 0 {
        return Err(EvalError::Empty);
    }
    let horizon = horizon.min(env.spec().horizon);
    let mut reset_rng = rng::stream(seed, rng::STREAM_EVAL);
    let mut returns = Vec::with_capacity(n_episodes);
    let mut lengths = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut obs = env.reset(&mut reset_rng);
        let mut total = 0.0;
        let mut len = 0;
        while len < horizon {
            let step = env.step(&act(&obs)?)?;
            total += step.reward;
            len += 1;
            obs = step.observation;
            if step.done {
                break;
            }
        }
        returns.push(total);
        lengths.push(len);
    }
    Ok((returns, lengths, horizon))
}

/// Runs `n_episodes` with [`PolicyParams::act_deterministic`], capping each
/// episode at `min(horizon, env horizon)` steps.
pub fn evaluate<E: Environment>(
    params: &PolicyParams,
    env: &mut E,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalFragment, EvalError> {
    let spec = env.spec();
    if spec.state_dim != params.state_dim() || spec.action_dim != params.action_dim() {
        return Err(EvalError::Mismatch {
            policy: params.state_dim(),
            policy_actions: params.action_dim(),
            env: spec.state_dim,
            env_actions: spec.action_dim,
        });
    }
    let mut usage = alloc::vec![0u64; params.n_experts()];
    let (returns, lengths, horizon) = run_episodes(env, n_episodes, horizon, seed, |s| {
        usage[params.route_clean(s)?.selected] += 1;
        Ok(params.act_deterministic(s)?)
    })?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalFragment { seed, horizon, returns, lengths, mean, std, expert_usage: usage })
}

/// Same protocol as [`evaluate`] with actions uniform in `(−1, 1)^{n_a}`.
pub fn random_baseline<E: Environment>(env: &mut E, n_episodes: usize, horizon: usize, seed: u64) -> Result<EvalFragment, EvalError> {
    let n_a = env.spec().action_dim;
    let mut action_rng = rng::stream(seed, rng::STREAM_AGENT);
    let (returns, lengths, horizon) = run_episodes(env, n_episodes, horizon, seed, |_| {
        Ok((0..n_a).map(|_| uniform(&mut action_rng, -1.0, 1.0)).collect())
    })?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalFragment { seed, horizon, returns, lengths, mean, std, expert_usage: Vec::new() })
}

/// Multi-seed summary of deterministic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Average episodic return of each seed.
    pub per_seed: Vec<f64>,
    pub avg: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n_seeds: usize,
    pub n_episodes: usize,
    pub n_act: usize,
    pub n_tot: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_seed_means(per_seed: Vec<f64>, n_episodes: usize, counts: ParamCount, config_hash: String) -> Self {
        let (avg, std) = mean_std(&per_seed);
        Self { n_seeds: per_seed.len(), per_seed, avg, std, n_episodes, n_act: counts.active, n_tot: counts.total, config_hash }
    }

    /// Verifies the stored aggregates against the per-seed values.
    pub fn check(&self) -> Result<(), EvalError> {
        if self.n_seeds != self.per_seed.len() {
            return Err(EvalError::Inconsistent("n_seeds"));
        }
        let (avg, std) = mean_std(&self.per_seed);
        if (avg - self.avg).abs() > 1e-9 || (std - self.std).abs() > 1e-9 {
            return Err(EvalError::Inconsistent("avg/std"));
        }
        if self.n_act > self.n_tot {
            return Err(EvalError::Inconsistent("N_act > N_tot"));
        }
        Ok(())
    }
}
