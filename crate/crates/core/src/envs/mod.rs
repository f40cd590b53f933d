//! Closed-form continuous-control environments with actions in `[−1, 1]^n_a`.

mod pendulum;
mod pointmass;
mod reacher;

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::RunRng;

pub use pendulum::{pendulum_energy, pendulum_integrate, pendulum_step, Pendulum, PendulumParams, PendulumState};
pub use pointmass::{pointmass_step, PointMass, PointMassParams, PointMassState};
pub use reacher::{fingertip, reacher_accelerations, reacher_step, Reacher, ReacherParams, ReacherState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("action has {got} entries, environment expects {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("unknown environment `{0}`")]
    Unknown(String),
}

/// Static description of an environment, exported for report generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub horizon: usize,
    pub dt: f64,
    pub observation_names: Vec<String>,
    pub action_names: Vec<String>,
}

impl EnvSpec {
    pub fn validate(&self) -> bool {
        self.state_dim >= 1
            && self.action_dim >= 1
            && self.horizon >= 1
            && self.observation_names.len() == self.state_dim
            && self.action_names.len() == self.action_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Environment-defined termination (never set for horizon truncation).
    pub done: bool,
    /// Set when the action had to be clamped into bounds.
    pub clamped: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
    fn observation(&self) -> Vec<f64>;
}

/// Validates and clamps an action into `[−1, 1]`.
pub(crate) fn clamp_action<const N: usize>(action: &[f64]) -> Result<([f64; N], bool), EnvError> {
    if action.len() != N {
        return Err(EnvError::ActionShape { expected: N, got: action.len() });
    }
    let mut out = [0.0; N];
    let mut clamped = false;
    for (o, &a) in out.iter_mut().zip(action) {
        if !a.is_finite() {
            return Err(EnvError::NonFiniteAction);
        }
        *o = a.clamp(-1.0, 1.0);
        clamped |= *o != a;
    }
    Ok((out, clamped))
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use core::f64::consts::{PI, TAU};
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut t = libm::fmod(theta + PI, TAU);
    if t <= 0.0 {
        t += TAU;
    }
    t - PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TwoLinkReacher,
    Pendulum,
    PointMass,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::TwoLinkReacher, EnvKind::Pendulum, EnvKind::PointMass];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::TwoLinkReacher => "two_link_reacher",
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointMass => "point_mass",
        }
    }

    pub fn make(self) -> AnyEnv {
        match self {
            EnvKind::TwoLinkReacher => AnyEnv::Reacher(Reacher::new(ReacherParams::default())),
            EnvKind::Pendulum => AnyEnv::Pendulum(Pendulum::new(PendulumParams::default())),
            EnvKind::PointMass => AnyEnv::PointMass(PointMass::new(PointMassParams::default())),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| EnvError::Unknown(s.to_string()))
    }
}

/// Closed set of in-repo environments behind one type.
#[derive(Clone, Debug)]
pub enum AnyEnv {
    Reacher(Reacher),
    Pendulum(Pendulum),
    PointMass(PointMass),
}

impl Environment for AnyEnv {
    fn spec(&self) -> &EnvSpec {
        match self {
            AnyEnv::Reacher(e) => e.spec(),
            AnyEnv::Pendulum(e) => e.spec(),
            AnyEnv::PointMass(e) => e.spec(),
        }
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        match self {
            AnyEnv::Reacher(e) => e.reset(rng),
            AnyEnv::Pendulum(e) => e.reset(rng),
            AnyEnv::PointMass(e) => e.reset(rng),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        match self {
            AnyEnv::Reacher(e) => e.step(action),
            AnyEnv::Pendulum(e) => e.step(action),
            AnyEnv::PointMass(e) => e.step(action),
        }
    }

    fn observation(&self) -> Vec<f64> {
        match self {
            AnyEnv::Reacher(e) => e.observation(),
            AnyEnv::Pendulum(e) => e.observation(),
            AnyEnv::PointMass(e) => e.observation(),
        }
    }
}

pub(crate) fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}
