//! Torque-driven rigid pendulum; `θ = 0` is upright.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{clamp_action, names, wrap_angle, EnvError, EnvSpec, Environment, Step};
use crate::rng::{uniform, RunRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    /// Torque per unit action.
    pub max_torque: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub horizon: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { gravity: 10.0, mass: 1.0, length: 1.0, max_torque: 2.0, max_speed: 8.0, dt: 0.05, horizon: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

fn angular_acceleration(p: &PendulumParams, theta: f64, torque: f64) -> f64 {
    3.0 * p.gravity / (2.0 * p.length) * libm::sin(theta) + 3.0 / (p.mass * p.length * p.length) * torque
}

/// `steps` Störmer–Verlet steps of size `h` without speed limiting.
pub fn pendulum_integrate(p: &PendulumParams, s: PendulumState, torque: f64, h: f64, steps: usize) -> PendulumState {
    let (mut th, mut w) = (s.theta, s.omega);
    let mut acc = angular_acceleration(p, th, torque);
    for _ in 0..steps {
        let half = w + 0.5 * h * acc;
        th += h * half;
        acc = angular_acceleration(p, th, torque);
        w = half + 0.5 * h * acc;
    }
    PendulumState { theta: th, omega: w }
}

/// Kinetic plus potential energy of the uniform rod about its pivot.
pub fn pendulum_energy(p: &PendulumParams, s: PendulumState) -> f64 {
    let inertia = p.mass * p.length * p.length / 3.0;
    0.5 * inertia * s.omega * s.omega + p.mass * p.gravity * 0.5 * p.length * libm::cos(s.theta)
}

/// One control step; the reward `−(θ² + 0.1·ω² + 0.001·u²)` is charged on
/// the pre-step state and applied torque `u`.
pub fn pendulum_step(p: &PendulumParams, s: &PendulumState, action: f64) -> (PendulumState, f64) {
    let u = p.max_torque * action;
    let th = wrap_angle(s.theta);
    let reward = -(th * th + 0.1 * s.omega * s.omega + 0.001 * u * u);
    let n = pendulum_integrate(p, *s, u, p.dt, 1);
    let next = PendulumState { theta: wrap_angle(n.theta), omega: n.omega.clamp(-p.max_speed, p.max_speed) };
    (next, reward)
}

#[derive(Clone, Debug)]
pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    state: PendulumState,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        let spec = EnvSpec {
            name: "pendulum".into(),
            state_dim: 3,
            action_dim: 1,
            action_low: -1.0,
            action_high: 1.0,
            horizon: params.horizon,
            dt: params.dt,
            observation_names: names(&["cos(θ)", "sin(θ)", "ω"]),
            action_names: names(&["τ"]),
        };
        Self { params, spec, state: PendulumState { theta: core::f64::consts::PI, omega: 0.0 } }
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    pub fn state(&self) -> &PendulumState {
        &self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        use core::f64::consts::PI;
        self.state = PendulumState { theta: uniform(rng, -PI, PI), omega: uniform(rng, -1.0, 1.0) };
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        let (a, clamped) = clamp_action::<1>(action)?;
        let (next, reward) = pendulum_step(&self.params, &self.state, a[0]);
        self.state = next;
        Ok(Step { observation: self.observation(), reward, done: false, clamped })
    }

    fn observation(&self) -> Vec<f64> {
        alloc::vec![libm::cos(self.state.theta), libm::sin(self.state.theta), self.state.omega]
    }
}
