//! Soft actor-critic for the mixture-of-experts actor: twin MLP critics with
//! Polyak-averaged targets, delayed actor and temperature updates, and the
//! load-balancing penalty added to the actor loss.

mod agent;
mod buffer;
mod train;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AutodiffError};
use crate::balancing::BalancingError;
use crate::envs::EnvError;
use crate::policy::{PolicyError, DEFAULT_LOG_STD_BOUNDS};

pub use agent::{ActorStats, SacAgent, UpdateStats};
pub use buffer::{Batch, ReplayBuffer, Transition};
pub use train::{train, EpisodeRecord, NullSink, TrainOutcome, TrainingSink};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SacError {
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Balancing(#[from] BalancingError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training sink failed: {0}")]
    Sink(String),
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub n_experts: usize,
    /// Weight of the importance plus load penalty.
    pub lambda: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Steps of uniform random actions before any update.
    pub warmup_steps: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    /// Polyak coefficient for the target critics.
    pub tau: f64,
    /// Actor and temperature are updated once every this many critic updates.
    pub target_delay: usize,
    pub initial_alpha: f64,
    /// Defaults to `−n_a` when absent.
    pub target_entropy: Option<f64>,
    pub critic_hidden: Vec<usize>,
    pub critic_activation: Activation,
    pub log_std_bounds: (f64, f64),
    /// Episode length cap; the environment horizon applies when absent or larger.
    pub horizon: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            lambda: 0.1,
            total_steps: 200_000,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            warmup_steps: 10_000,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            alpha_lr: 1e-3,
            gamma: 0.99,
            tau: 0.005,
            target_delay: 2,
            initial_alpha: 1.0,
            target_entropy: None,
            critic_hidden: alloc::vec![64, 64],
            critic_activation: Activation::Tanh,
            log_std_bounds: DEFAULT_LOG_STD_BOUNDS,
            horizon: None,
            checkpoint_every: 50_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let checks: [(bool, &'static str); 14] = [
            (self.n_experts >= 1, "n_experts must be at least 1"),
            (self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be finite and non-negative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.buffer_capacity >= 1, "buffer_capacity must be positive"),
            (self.actor_lr > 0.0, "actor_lr must be positive"),
            (self.critic_lr > 0.0, "critic_lr must be positive"),
            (self.alpha_lr > 0.0, "alpha_lr must be positive"),
            ((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]"),
            (self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.target_delay >= 1, "target_delay must be positive"),
            (self.initial_alpha > 0.0 && self.initial_alpha.is_finite(), "initial_alpha must be positive"),
            (self.critic_hidden.iter().all(|&w| w > 0), "critic widths must be positive"),
            (self.log_std_bounds.0 < self.log_std_bounds.1, "log_std bounds are inverted"),
            (self.horizon != Some(0), "horizon must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(SacError::Config(msg)),
            None => Ok(()),
        }
    }
}
