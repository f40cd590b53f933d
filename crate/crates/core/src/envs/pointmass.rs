//! Planar point mass with direct acceleration control.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{clamp_action, names, EnvError, EnvSpec, Environment, Step};
use crate::rng::{uniform, RunRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassParams {
    pub dt: f64,
    pub goal_tolerance: f64,
    pub horizon: usize,
    /// Half-width of the square from which random starts and goals are drawn.
    pub arena: f64,
    /// Fixed start position; drawn at random when `None`.
    pub start: Option<[f64; 2]>,
    /// Fixed goal position; drawn at random when `None`.
    pub goal: Option<[f64; 2]>,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self { dt: 0.1, goal_tolerance: 0.05, horizon: 100, arena: 1.0, start: None, goal: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
}

/// One step `p′ = p + dt·v`, `v′ = v + dt·a`. Returns the next state, the
/// reward `−‖p′ − goal‖` and whether `p′` lies within tolerance of the goal.
pub fn pointmass_step(p: &PointMassParams, s: &PointMassState, a: [f64; 2]) -> (PointMassState, f64, bool) {
    let position = [s.position[0] + p.dt * s.velocity[0], s.position[1] + p.dt * s.velocity[1]];
    let velocity = [s.velocity[0] + p.dt * a[0], s.velocity[1] + p.dt * a[1]];
    let dist = libm::hypot(position[0] - s.goal[0], position[1] - s.goal[1]);
    (PointMassState { position, velocity, goal: s.goal }, -dist, dist < p.goal_tolerance)
}

#[derive(Clone, Debug)]
pub struct PointMass {
    params: PointMassParams,
    spec: EnvSpec,
    state: PointMassState,
}

impl PointMass {
    pub fn new(params: PointMassParams) -> Self {
        let spec = EnvSpec {
            name: "point_mass".into(),
            state_dim: 6,
            action_dim: 2,
            action_low: -1.0,
            action_high: 1.0,
            horizon: params.horizon,
            dt: params.dt,
            observation_names: names(&["x", "y", "v_x", "v_y", "Δ_x", "Δ_y"]),
            action_names: names(&["a_x", "a_y"]),
        };
        let state = PointMassState {
            position: params.start.unwrap_or([0.0; 2]),
            velocity: [0.0; 2],
            goal: params.goal.unwrap_or([0.0; 2]),
        };
        Self { params, spec, state }
    }

    pub fn params(&self) -> &PointMassParams {
        &self.params
    }

    pub fn state(&self) -> &PointMassState {
        &self.state
    }

    pub fn set_state(&mut self, state: PointMassState) {
        self.state = state;
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        let w = self.params.arena;
        let mut draw = |fixed: Option<[f64; 2]>| fixed.unwrap_or_else(|| [uniform(rng, -w, w), uniform(rng, -w, w)]);
        let position = draw(self.params.start);
        let goal = draw(self.params.goal);
        self.state = PointMassState { position, velocity: [0.0; 2], goal };
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        let (a, clamped) = clamp_action::<2>(action)?;
        let (next, reward, done) = pointmass_step(&self.params, &self.state, a);
        self.state = next;
        Ok(Step { observation: self.observation(), reward, done, clamped })
    }

    fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        alloc::vec![
            s.position[0],
            s.position[1],
            s.velocity[0],
            s.velocity[1],
            s.position[0] - s.goal[0],
            s.position[1] - s.goal[1],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_integration() {
        let p = PointMassParams::default();
        let s = PointMassState { position: [0.0, 0.0], velocity: [1.0, -2.0], goal: [1.0, 1.0] };
        let (n, r, done) = pointmass_step(&p, &s, [0.5, 1.0]);
        assert_eq!(n.position, [0.1, -0.2]);
        assert!((n.velocity[0] - 1.05).abs() < 1e-15 && (n.velocity[1] + 1.9).abs() < 1e-15);
        let want = -((0.9f64).powi(2) + (1.2f64).powi(2)).sqrt();
        assert!((r - want).abs() < 1e-15);
        assert!(!done);
    }

    #[test]
    fn zero_action_keeps_velocity() {
        let p = PointMassParams::default();
        let s = PointMassState { position: [0.2, 0.1], velocity: [0.3, -0.7], goal: [-1.0, 1.0] };
        let (n, _, _) = pointmass_step(&p, &s, [0.0, 0.0]);
        assert_eq!(n.velocity, s.velocity);
    }

    #[test]
    fn terminates_near_goal_only() {
        let p = PointMassParams::default();
        let s = PointMassState { position: [0.0, 0.0], velocity: [0.4, 0.0], goal: [0.05, 0.0] };
        let (_, r, done) = pointmass_step(&p, &s, [0.0, 0.0]);
        assert!(done && r.abs() < 0.05);
        let far = PointMassState { goal: [0.5, 0.0], ..s };
        assert!(!pointmass_step(&p, &far, [0.0, 0.0]).2);
    }

    #[test]
    fn fixed_start_and_goal() {
        let params = PointMassParams { start: Some([0.5, -0.5]), goal: Some([0.0, 0.25]), ..Default::default() };
        let mut env = PointMass::new(params);
        let obs = env.reset(&mut crate::rng::stream(0, crate::rng::STREAM_ENV));
        assert_eq!(obs, alloc::vec![0.5, -0.5, 0.0, 0.0, 0.5, -0.75]);
    }
}
