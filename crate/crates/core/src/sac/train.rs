//! Environment interaction loop.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ReplayBuffer, SacAgent, SacConfig, SacError, Transition};
use crate::envs::Environment;
use crate::rng::{self, uniform};

/// Per-episode training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Environment steps completed when the episode ended.
    pub step: usize,
    pub episode: usize,
    pub episodic_return: f64,
    pub length: usize,
    /// Means over the updates made during the episode.
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    pub alpha: f64,
    /// Policy selections per expert during the episode; all zero during warmup.
    pub expert_histogram: Vec<u64>,
}

/// Receives progress during [`train`].
pub trait TrainingSink {
    fn on_episode(&mut self, _record: &EpisodeRecord) -> Result<(), String> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and once more at the end.
    fn on_checkpoint(&mut self, _step: usize, _agent: &SacAgent) -> Result<(), String> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl TrainingSink for NullSink {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    pub episodes: Vec<EpisodeRecord>,
    /// Expert selected at every policy-driven step, in order.
    pub selections: Vec<u16>,
    /// Index of the first policy-driven step.
    pub first_policy_step: usize,
}

#[derive(Default)]
struct Means {
    sum: f64,
    n: usize,
}

impl Means {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }
}

/// Runs soft actor-critic on `env` for `config.total_steps` steps.
///
/// Each stochastic component draws from its own stream of `seed`, so the
/// outcome is a pure function of `(env, config, seed)`.
pub fn train<E: Environment>(
    env: &mut E,
    config: &SacConfig,
    seed: u64,
    sink: &mut dyn TrainingSink,
) -> Result<TrainOutcome, SacError> {
    config.validate()?;
    let spec = env.spec().clone();
    let (ns, na, m) = (spec.state_dim, spec.action_dim, config.n_experts);
    let horizon = config.horizon.map_or(spec.horizon, |h| h.min(spec.horizon));
    let mut init_rng = rng::stream(seed, rng::STREAM_INIT);
    let mut env_rng = rng::stream(seed, rng::STREAM_ENV);
    let mut agent_rng = rng::stream(seed, rng::STREAM_AGENT);
    let mut buffer_rng = rng::stream(seed, rng::STREAM_BUFFER);

    let mut agent = SacAgent::new(ns, na, config, &mut init_rng)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity.min(config.total_steps.max(1)), ns, na)?;
    let mut episodes = Vec::new();
    let mut selections = Vec::with_capacity(config.total_steps.saturating_sub(config.warmup_steps));

    let mut obs = env.reset(&mut env_rng);
    let mut ep_return = 0.0;
    let mut ep_len = 0;
    let mut histogram = alloc::vec![0u64; m];
    let (mut actor_m, mut critic_m, mut aux_m) = (Means::default(), Means::default(), Means::default());
    let mut updates: usize = 0;

    for t in 0..config.total_steps {
        let action = if t < config.warmup_steps {
            (0..na).map(|_| uniform(&mut agent_rng, -1.0, 1.0)).collect()
        } else {
            let act = agent.policy.act_stochastic(&obs, &mut agent_rng)?;
            histogram[act.gate.selected] += 1;
            selections.push(act.gate.selected as u16);
            act.action
        };
        let step = env.step(&action)?;
        buffer.push(&Transition {
            state: obs,
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            done: step.done,
        })?;
        obs = step.observation;
        ep_return += step.reward;
        ep_len += 1;

        if t >= config.warmup_steps {
            let batch = buffer.sample(config.batch_size, &mut buffer_rng)?;
            updates += 1;
            let stats = agent.update(&batch, updates % config.target_delay == 0, &mut agent_rng)?;
            critic_m.add(stats.critic_loss);
            if let Some(a) = stats.actor {
                actor_m.add(a.actor_loss);
                aux_m.add(a.aux_loss);
            }
        }

        if step.done || ep_len >= horizon {
            let record = EpisodeRecord {
                step: t + 1,
                episode: episodes.len(),
                episodic_return: ep_return,
                length: ep_len,
                actor_loss: actor_m.take(),
                critic_loss: critic_m.take(),
                aux_loss: aux_m.take(),
                alpha: agent.alpha(),
                expert_histogram: histogram.clone(),
            };
            sink.on_episode(&record).map_err(SacError::Sink)?;
            episodes.push(record);
            histogram.iter_mut().for_each(|h| *h = 0);
            obs = env.reset(&mut env_rng);
            ep_return = 0.0;
            ep_len = 0;
        }

        let done_steps = t + 1;
        if config.checkpoint_every > 0 && done_steps % config.checkpoint_every == 0 && done_steps < config.total_steps {
            sink.on_checkpoint(done_steps, &agent).map_err(SacError::Sink)?;
        }
    }
    sink.on_checkpoint(config.total_steps, &agent).map_err(SacError::Sink)?;
    Ok(TrainOutcome { agent, buffer, episodes, selections, first_policy_step: config.warmup_steps.min(config.total_steps) })
}
