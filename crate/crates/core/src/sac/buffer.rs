//! Fixed-capacity FIFO replay buffer with flat row-major storage.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SacError;
use crate::autodiff::Tensor;

/// One environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Environment termination; horizon truncation is stored as `false`.
    pub done: bool,
}

/// Minibatch drawn from a [`ReplayBuffer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    /// Slot the next push overwrites once the buffer is full.
    head: usize,
    len: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
}

impl ReplayBuffer {
    /// Storage grows on demand up to `capacity` rows.
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self, SacError> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(SacError::Config("replay buffer dimensions must be positive"));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            head: 0,
            len: 0,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, t: &Transition) -> Result<(), SacError> {
        let (ns, na) = (self.state_dim, self.action_dim);
        if t.state.len() != ns || t.next_state.len() != ns || t.action.len() != na {
            return Err(SacError::Shape("transition does not match buffer dimensions"));
        }
        let finite = t.reward.is_finite()
            && t.state.iter().chain(&t.next_state).chain(&t.action).all(|x| x.is_finite());
        if !finite {
            return Err(SacError::NonFinite("transition"));
        }
        if self.len < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.dones.push(t.done);
            self.len += 1;
        } else {
            let i = self.head;
            self.states[i * ns..(i + 1) * ns].copy_from_slice(&t.state);
            self.actions[i * na..(i + 1) * na].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_states[i * ns..(i + 1) * ns].copy_from_slice(&t.next_state);
            self.dones[i] = t.done;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// Transitions in storage order, oldest first.
    pub fn get(&self, k: usize) -> Option<Transition> {
        if k >= self.len {
            return None;
        }
        let i = if self.len < self.capacity { k } else { (self.head + k) % self.capacity };
        Some(self.row(i))
    }

    fn row(&self, i: usize) -> Transition {
        let (ns, na) = (self.state_dim, self.action_dim);
        Transition {
            state: self.states[i * ns..(i + 1) * ns].to_vec(),
            action: self.actions[i * na..(i + 1) * na].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * ns..(i + 1) * ns].to_vec(),
            done: self.dones[i],
        }
    }

    /// Stored states, oldest first, as a `[len × n_s]` matrix.
    pub fn states(&self) -> Tensor {
        let ns = self.state_dim;
        let mut out = Vec::with_capacity(self.len * ns);
        for k in 0..self.len {
            let i = if self.len < self.capacity { k } else { (self.head + k) % self.capacity };
            out.extend_from_slice(&self.states[i * ns..(i + 1) * ns]);
        }
        Tensor::matrix(self.len, ns, out).expect("buffer state storage is rectangular")
    }

    /// Uniform sample of `batch` rows, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch, SacError> {
        if self.len == 0 || batch == 0 {
            return Err(SacError::Config("cannot sample from an empty buffer"));
        }
        let (ns, na) = (self.state_dim, self.action_dim);
        let mut states = Vec::with_capacity(batch * ns);
        let mut actions = Vec::with_capacity(batch * na);
        let mut next_states = Vec::with_capacity(batch * ns);
        let mut rewards = Vec::with_capacity(batch);
        let mut dones = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..self.len);
            states.extend_from_slice(&self.states[i * ns..(i + 1) * ns]);
            actions.extend_from_slice(&self.actions[i * na..(i + 1) * na]);
            next_states.extend_from_slice(&self.next_states[i * ns..(i + 1) * ns]);
            rewards.push(self.rewards[i]);
            dones.push(if self.dones[i] { 1.0 } else { 0.0 });
        }
        Ok(Batch {
            states: Tensor::matrix(batch, ns, states)?,
            actions: Tensor::matrix(batch, na, actions)?,
            rewards,
            next_states: Tensor::matrix(batch, ns, next_states)?,
            dones,
        })
    }
}
