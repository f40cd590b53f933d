//! Declarative run configuration and run identifiers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use topmoe_core::distill::DEFAULT_DEPTH;
use topmoe_core::envs::{AnyEnv, EnvKind, Pendulum, PendulumParams, PointMass, PointMassParams, Reacher, ReacherParams};
use topmoe_core::eval::{DEFAULT_EPISODES, DEFAULT_HORIZON};
use topmoe_core::interpret::DEFAULT_THRESHOLD;
use topmoe_core::sac::SacConfig;

use crate::error::{CliError, Result};

/// JSON schema of [`RunConfig`], kept next to the type it describes.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../run_config.schema.json");

fn default_top_k() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

fn default_episodes() -> usize {
    DEFAULT_EPISODES
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Everything a run needs; only `env` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    #[serde(default)]
    pub sac: SacConfig,
    /// Experts active per state; only 1 is supported.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Overrides the environment's control interval.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_depth")]
    pub distill_depth: usize,
    #[serde(default = "default_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_horizon")]
    pub eval_horizon: usize,
    /// Coefficient magnitude below which equation terms are omitted.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl RunConfig {
    pub fn new(env: EnvKind) -> Self {
        Self {
            env,
            sac: SacConfig::default(),
            top_k: default_top_k(),
            dt: None,
            out_dir: default_out_dir(),
            seeds: default_seeds(),
            distill_depth: default_depth(),
            eval_episodes: default_episodes(),
            eval_horizon: default_horizon(),
            threshold: default_threshold(),
        }
    }

    /// Parses and validates; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(CliError::usage(format!("invalid config: `{field}` {msg}")));
        if let Err(e) = self.sac.validate() {
            return Err(CliError::usage(format!("invalid config: `sac`: {e}")));
        }
        if self.top_k != 1 {
            return fail("top_k", "must be 1");
        }
        if self.dt.is_some_and(|dt| !(dt > 0.0 && dt.is_finite())) {
            return fail("dt", "must be positive");
        }
        if self.seeds.is_empty() {
            return fail("seeds", "must list at least one seed");
        }
        if self.distill_depth == 0 {
            return fail("distill_depth", "must be at least 1");
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes", "must be positive");
        }
        if self.eval_horizon == 0 {
            return fail("eval_horizon", "must be positive");
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return fail("threshold", "must be finite and non-negative");
        }
        Ok(())
    }

    /// Canonical JSON of the settings that determine results (seeds and
    /// output location excluded).
    fn canonical(&self) -> String {
        let mut key = self.clone();
        key.seeds.clear();
        key.out_dir = PathBuf::new();
        serde_json::to_string(&key).expect("config serializes")
    }

    /// Hash of the result-determining settings, shared by all seeds.
    pub fn config_hash(&self) -> String {
        short_hash(self.canonical().as_bytes(), None)
    }

    /// Identifier of the run `(config, seed)`.
    pub fn run_id(&self, seed: u64) -> String {
        short_hash(self.canonical().as_bytes(), Some(seed))
    }

    pub fn make_env(&self) -> AnyEnv {
        make_env(self.env, self.dt)
    }
}

pub(crate) fn short_hash(bytes: &[u8], seed: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    if let Some(s) = seed {
        h.update(s.to_le_bytes());
    }
    let digest = format!("{:x}", h.finalize());
    digest[..16].to_string()
}

/// Builds an environment, optionally with a different control interval.
pub fn make_env(kind: EnvKind, dt: Option<f64>) -> AnyEnv {
    let Some(dt) = dt else {
        return kind.make();
    };
    match kind {
        EnvKind::TwoLinkReacher => AnyEnv::Reacher(Reacher::new(ReacherParams { dt, ..Default::default() })),
        EnvKind::Pendulum => AnyEnv::Pendulum(Pendulum::new(PendulumParams { dt, ..Default::default() })),
        EnvKind::PointMass => AnyEnv::PointMass(PointMass::new(PointMassParams { dt, ..Default::default() })),
    }
}
