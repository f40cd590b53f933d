//! Planar two-link arm with point masses at the link tips and no gravity.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{clamp_action, names, wrap_angle, EnvError, EnvSpec, Environment, Step};
use crate::rng::{uniform, RunRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacherParams {
    pub link_lengths: [f64; 2],
    pub masses: [f64; 2],
    /// Rotor inertia added to each joint.
    pub armature: f64,
    pub damping: f64,
    /// Torque per unit action.
    pub gear: f64,
    pub dt: f64,
    /// Semi-implicit Euler substeps per control step.
    pub substeps: usize,
    pub control_cost: f64,
    pub horizon: usize,
    /// Targets are drawn with radius in `[target_min_radius, target_max_radius)`.
    pub target_min_radius: f64,
    pub target_max_radius: f64,
}

impl Default for ReacherParams {
    fn default() -> Self {
        Self {
            link_lengths: [0.1, 0.1],
            masses: [0.5, 0.5],
            armature: 0.01,
            damping: 0.1,
            gear: 5.0,
            dt: 0.02,
            substeps: 200,
            control_cost: 0.1,
            horizon: 50,
            target_min_radius: 0.02,
            target_max_radius: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacherState {
    pub angles: [f64; 2],
    pub velocities: [f64; 2],
    pub target: [f64; 2],
}

/// Fingertip position from joint angles.
pub fn fingertip(params: &ReacherParams, angles: [f64; 2]) -> [f64; 2] {
    let [l1, l2] = params.link_lengths;
    let a12 = angles[0] + angles[1];
    [
        l1 * libm::cos(angles[0]) + l2 * libm::cos(a12),
        l1 * libm::sin(angles[0]) + l2 * libm::sin(a12),
    ]
}

/// Joint accelerations for joint torques `torque` (already geared).
pub fn reacher_accelerations(params: &ReacherParams, angles: [f64; 2], vel: [f64; 2], torque: [f64; 2]) -> [f64; 2] {
    let [l1, l2] = params.link_lengths;
    let [m1, m2] = params.masses;
    let (s2, c2) = (libm::sin(angles[1]), libm::cos(angles[1]));
    let m11 = m1 * l1 * l1 + m2 * (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * c2) + params.armature;
    let m12 = m2 * (l2 * l2 + l1 * l2 * c2);
    let m22 = m2 * l2 * l2 + params.armature;
    let h = m2 * l1 * l2 * s2;
    let r1 = torque[0] - params.damping * vel[0] + h * (2.0 * vel[0] * vel[1] + vel[1] * vel[1]);
    let r2 = torque[1] - params.damping * vel[1] - h * vel[0] * vel[0];
    let det = m11 * m22 - m12 * m12;
    [(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det]
}

fn distance(params: &ReacherParams, s: &ReacherState) -> f64 {
    let tip = fingertip(params, s.angles);
    libm::hypot(tip[0] - s.target[0], tip[1] - s.target[1])
}

/// One control step from `state` under a clamped action. Returns the next
/// state and the reward `−‖fingertip − target‖ − c·‖a‖²` at the next state.
pub fn reacher_step(params: &ReacherParams, state: &ReacherState, action: [f64; 2]) -> (ReacherState, f64) {
    let torque = [params.gear * action[0], params.gear * action[1]];
    let h = params.dt / params.substeps.max(1) as f64;
    let mut q = state.angles;
    let mut v = state.velocities;
    for _ in 0..params.substeps.max(1) {
        let acc = reacher_accelerations(params, q, v, torque);
        for j in 0..2 {
            v[j] += h * acc[j];
            q[j] += h * v[j];
        }
    }
    let next = ReacherState { angles: [wrap_angle(q[0]), wrap_angle(q[1])], velocities: v, target: state.target };
    let ctrl = action[0] * action[0] + action[1] * action[1];
    let reward = -distance(params, &next) - params.control_cost * ctrl;
    (next, reward)
}

#[derive(Clone, Debug)]
pub struct Reacher {
    params: ReacherParams,
    spec: EnvSpec,
    state: ReacherState,
}

impl Reacher {
    pub fn new(params: ReacherParams) -> Self {
        let spec = EnvSpec {
            name: "two_link_reacher".into(),
            state_dim: 11,
            action_dim: 2,
            action_low: -1.0,
            action_high: 1.0,
            horizon: params.horizon,
            dt: params.dt,
            observation_names: names(&[
                "cos(θ_fa)", "sin(θ_fa)", "cos(θ_sa)", "sin(θ_sa)", "x_T", "y_T", "ω_fa", "ω_sa", "Δ_x", "Δ_y", "Δ_z",
            ]),
            action_names: names(&["τ_1", "τ_2"]),
        };
        let state = ReacherState { angles: [0.0; 2], velocities: [0.0; 2], target: [params.target_max_radius / 2.0, 0.0] };
        Self { params, spec, state }
    }

    pub fn params(&self) -> &ReacherParams {
        &self.params
    }

    pub fn state(&self) -> &ReacherState {
        &self.state
    }

    pub fn set_state(&mut self, state: ReacherState) {
        self.state = state;
    }

    pub fn distance_to_target(&self) -> f64 {
        distance(&self.params, &self.state)
    }
}

impl Environment for Reacher {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        let angles = [uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1)];
        let velocities = [uniform(rng, -0.005, 0.005), uniform(rng, -0.005, 0.005)];
        let (lo, hi) = (self.params.target_min_radius, self.params.target_max_radius);
        let target = loop {
            let t = [uniform(rng, -hi, hi), uniform(rng, -hi, hi)];
            let r = libm::hypot(t[0], t[1]);
            if r >= lo && r < hi {
                break t;
            }
        };
        self.state = ReacherState { angles, velocities, target };
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        let (a, clamped) = clamp_action::<2>(action)?;
        let (next, reward) = reacher_step(&self.params, &self.state, a);
        self.state = next;
        Ok(Step { observation: self.observation(), reward, done: false, clamped })
    }

    fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        let tip = fingertip(&self.params, s.angles);
        alloc::vec![
            libm::cos(s.angles[0]),
            libm::sin(s.angles[0]),
            libm::cos(s.angles[1]),
            libm::sin(s.angles[1]),
            s.target[0],
            s.target[1],
            s.velocities[0],
            s.velocities[1],
            tip[0] - s.target[0],
            tip[1] - s.target[1],
            0.0,
        ]
    }
}
