//! Actor, twin critics, temperature and their optimizers.

use alloc::vec::Vec;

use super::{Batch, SacConfig, SacError};
use crate::autodiff::{adam_step, Graph, MlpParams, OptimizerState, Tensor, Var};
use crate::balancing::aux_loss_var;
use crate::policy::{PolicyParams, SampledBatch};
use crate::rng::{standard_normal, RunRng};

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub policy: PolicyParams,
    pub critics: [MlpParams; 2],
    pub target_critics: [MlpParams; 2],
    log_alpha: Tensor,
    target_entropy: f64,
    lambda: f64,
    gamma: f64,
    tau: f64,
    actor_opt: OptimizerState,
    critic_opts: [OptimizerState; 2],
    alpha_opt: OptimizerState,
}

/// Values reported by one actor update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorStats {
    /// `mean(α·log π − min Q)`, without the balancing term.
    pub actor_loss: f64,
    pub aux_loss: f64,
    pub mean_log_prob: f64,
}

/// Values reported by one full training update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor: Option<ActorStats>,
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor, SacError> {
    if a.rows() != b.rows() {
        return Err(SacError::Shape("row counts differ"));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Ok(Tensor::matrix(a.rows(), a.cols() + b.cols(), out)?)
}

impl SacAgent {
    /// Fresh agent; targets start as copies of the online critics.
    pub fn new(state_dim: usize, action_dim: usize, config: &SacConfig, rng: &mut RunRng) -> Result<Self, SacError> {
        config.validate()?;
        let policy = PolicyParams::new_random(config.n_experts, state_dim, action_dim, rng)?
            .with_log_std_bounds(config.log_std_bounds)?;
        let mut widths = alloc::vec![state_dim + action_dim];
        widths.extend_from_slice(&config.critic_hidden);
        widths.push(1);
        let c1 = MlpParams::new(&widths, config.critic_activation, rng)?;
        let c2 = MlpParams::new(&widths, config.critic_activation, rng)?;
        let actor_opt = OptimizerState::for_tensors(config.actor_lr, &policy.tensors())?;
        let critic_opts = [
            OptimizerState::for_tensors(config.critic_lr, &c1.tensors())?,
            OptimizerState::for_tensors(config.critic_lr, &c2.tensors())?,
        ];
        Ok(Self {
            target_critics: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            policy,
            log_alpha: Tensor::vector(alloc::vec![libm::log(config.initial_alpha)]),
            target_entropy: config.target_entropy.unwrap_or(-(action_dim as f64)),
            lambda: config.lambda,
            gamma: config.gamma,
            tau: config.tau,
            actor_opt,
            critic_opts,
            alpha_opt: OptimizerState::new(config.alpha_lr, &[1])?,
        })
    }

    pub fn alpha(&self) -> f64 {
        libm::exp(self.log_alpha.values()[0])
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    /// Scaled gate noise `[B × M]` and standard normal action draws `[B × n_a]`.
    fn draw_noise(&self, batch: usize, rng: &mut RunRng) -> Result<(Tensor, Tensor), SacError> {
        let m = self.policy.n_experts();
        let std = 1.0 / m as f64;
        let gate: Vec<f64> = (0..batch * m).map(|_| std * standard_normal(rng)).collect();
        let na = self.policy.action_dim();
        let eps: Vec<f64> = (0..batch * na).map(|_| standard_normal(rng)).collect();
        Ok((Tensor::matrix(batch, m, gate)?, Tensor::matrix(batch, na, eps)?))
    }

    /// Soft Bellman targets `r + γ(1 − d)(min Q̄(s′, a′) − α log π(a′|s′))`.
    pub fn critic_targets(&self, batch: &Batch, rng: &mut RunRng) -> Result<Vec<f64>, SacError> {
        let b = batch.rewards.len();
        let (gate, eps) = self.draw_noise(b, rng)?;
        let mut g = Graph::new();
        let bound = self.policy.bind(&mut g, false)?;
        let next = g.constant(batch.next_states.clone())?;
        let smp = bound.sample(&mut g, next, Some(&gate), &eps)?;
        let x = concat_rows(&batch.next_states, g.value(smp.action))?;
        let q1 = self.target_critics[0].forward(&x)?;
        let q2 = self.target_critics[1].forward(&x)?;
        let logp = g.value(smp.log_prob).values();
        let alpha = self.alpha();
        Ok((0..b)
            .map(|i| {
                let soft = q1.values()[i].min(q2.values()[i]) - alpha * logp[i];
                batch.rewards[i] + self.gamma * (1.0 - batch.dones[i]) * soft
            })
            .collect())
    }

    /// One Adam step on both critics; returns the summed mean squared errors.
    pub fn critic_update(&mut self, batch: &Batch, rng: &mut RunRng) -> Result<f64, SacError> {
        let targets = self.critic_targets(batch, rng)?;
        let x = concat_rows(&batch.states, &batch.actions)?;
        let y = Tensor::matrix(targets.len(), 1, targets)?;
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let yv = g.constant(y)?;
        let b1 = self.critics[0].bind(&mut g, true)?;
        let b2 = self.critics[1].bind(&mut g, true)?;
        let mse = |g: &mut Graph, q| -> Result<_, SacError> {
            let d = g.sub(q, yv)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        };
        let q1 = b1.forward(&mut g, xv)?;
        let l1 = mse(&mut g, q1)?;
        let q2 = b2.forward(&mut g, xv)?;
        let l2 = mse(&mut g, q2)?;
        let loss = g.add(l1, l2)?;
        g.backward(loss)?;
        for (k, bound) in [b1, b2].iter().enumerate() {
            let grads = self.critics[k].grads(&g, bound);
            let mut params = self.critics[k].tensors_mut();
            adam_step(&mut params, &grads, &mut self.critic_opts[k])?;
        }
        Ok(g.scalar(loss))
    }

    /// `(mean(α·log π − min Q), λ·aux, sum)` for a sampled batch.
    fn actor_objective(&self, g: &mut Graph, states: Var, smp: &SampledBatch) -> Result<(Var, Var, Var), SacError> {
        let x = g.concat_cols(states, smp.action)?;
        let c1 = self.critics[0].bind(g, false)?;
        let c2 = self.critics[1].bind(g, false)?;
        let q1 = c1.forward(g, x)?;
        let q2 = c2.forward(g, x)?;
        let q = g.minimum(q1, q2)?;
        let weighted = g.scale(smp.log_prob, self.alpha());
        let diff = g.sub(weighted, q)?;
        let actor = g.mean(diff);
        let aux = aux_loss_var(g, smp.logits, self.lambda)?;
        let total = g.add(actor, aux)?;
        Ok((actor, aux, total))
    }

    /// One Adam step on the policy against `mean(α·log π − min Q) + λ·aux`.
    pub fn actor_update(&mut self, states: &Tensor, rng: &mut RunRng) -> Result<ActorStats, SacError> {
        let b = states.rows();
        let (gate, eps) = self.draw_noise(b, rng)?;
        let mut g = Graph::new();
        let bound = self.policy.bind(&mut g, true)?;
        let s = g.constant(states.clone())?;
        let smp = bound.sample(&mut g, s, Some(&gate), &eps)?;
        let (actor, aux, total) = self.actor_objective(&mut g, s, &smp)?;
        g.backward(total)?;
        let grads = bound.grads(&g);
        let mut params = self.policy.tensors_mut();
        adam_step(&mut params, &grads, &mut self.actor_opt)?;
        self.policy.clamp_log_std();
        let logp = g.value(smp.log_prob).values();
        Ok(ActorStats {
            actor_loss: g.scalar(actor),
            aux_loss: g.scalar(aux),
            mean_log_prob: logp.iter().sum::<f64>() / logp.len() as f64,
        })
    }

    /// One Adam step on `log α` against `−log α·(mean log π + H̄)`; returns the loss.
    pub fn alpha_update(&mut self, mean_log_prob: f64) -> Result<f64, SacError> {
        if !mean_log_prob.is_finite() {
            return Err(SacError::NonFinite("mean log-probability"));
        }
        let slack = mean_log_prob + self.target_entropy;
        let loss = -self.log_alpha.values()[0] * slack;
        let grad = [-slack];
        adam_step(&mut [&mut self.log_alpha], &[Some(&grad[..])], &mut self.alpha_opt)?;
        Ok(loss)
    }

    pub fn polyak_update(&mut self) {
        for k in 0..2 {
            self.target_critics[k].polyak_from(&self.critics[k], self.tau);
        }
    }

    /// Critic step and Polyak averaging; actor and temperature steps when
    /// `with_actor` is set.
    pub fn update(&mut self, batch: &Batch, with_actor: bool, rng: &mut RunRng) -> Result<UpdateStats, SacError> {
        let critic_loss = self.critic_update(batch, rng)?;
        self.polyak_update();
        let actor = if with_actor {
            let stats = self.actor_update(&batch.states, rng)?;
            self.alpha_update(stats.mean_log_prob)?;
            Some(stats)
        } else {
            None
        };
        Ok(UpdateStats { critic_loss, actor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};
    use crate::sac::{ReplayBuffer, Transition};
    use rand::Rng;

    fn small_config() -> SacConfig {
        SacConfig { n_experts: 3, critic_hidden: alloc::vec![8], batch_size: 16, ..Default::default() }
    }

    fn filled_buffer(r: &mut RunRng) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(100, 2, 1).unwrap();
        for _ in 0..50 {
            let s = alloc::vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let a = alloc::vec![r.random_range(-1.0..1.0)];
            let reward = -s[0] * s[0] - a[0] * a[0];
            let next = alloc::vec![s[0] + 0.1 * a[0], s[1]];
            buf.push(&Transition { state: s, action: a, reward, next_state: next, done: false }).unwrap();
        }
        buf
    }

    #[test]
    fn terminal_targets_equal_rewards() {
        let mut r = stream(1, rng::STREAM_INIT);
        let agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let buf = filled_buffer(&mut r);
        let mut batch = buf.sample(8, &mut r).unwrap();
        batch.dones = alloc::vec![1.0; 8];
        let y = agent.critic_targets(&batch, &mut r).unwrap();
        assert_eq!(y, batch.rewards);
    }

    #[test]
    fn critic_targets_match_scalar_recomputation() {
        let mut r = stream(2, rng::STREAM_INIT);
        let agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let buf = filled_buffer(&mut r);
        let batch = buf.sample(4, &mut r).unwrap();
        let mut noise = stream(9, rng::STREAM_AGENT);
        let y = agent.critic_targets(&batch, &mut noise.clone()).unwrap();
        // replay the same noise draws row by row through the scalar policy path
        let m = agent.policy.n_experts();
        let gate: Vec<f64> = (0..4 * m).map(|_| standard_normal(&mut noise) / m as f64).collect();
        let eps: Vec<f64> = (0..4).map(|_| standard_normal(&mut noise)).collect();
        for i in 0..4 {
            let s = batch.next_states.row(i);
            let mut logits = agent.policy.logits(s).unwrap();
            for (l, n) in logits.iter_mut().zip(&gate[i * m..(i + 1) * m]) {
                *l += n;
            }
            let sel = crate::autodiff::argmax(&logits);
            let mean = agent.policy.expert_output(sel, s).unwrap()[0];
            let ls = agent.policy.expert_log_std(sel).values()[0];
            let u = mean + ls.exp() * eps[i];
            let logp = crate::policy::squashed_log_prob(&[u], &[mean], &[ls]);
            let x = Tensor::matrix(1, 3, alloc::vec![s[0], s[1], u.tanh()]).unwrap();
            let q1 = agent.target_critics[0].forward(&x).unwrap().values()[0];
            let q2 = agent.target_critics[1].forward(&x).unwrap().values()[0];
            let want = batch.rewards[i] + 0.99 * (q1.min(q2) - agent.alpha() * logp);
            assert!((y[i] - want).abs() < 1e-12, "{} vs {}", y[i], want);
        }
    }

    #[test]
    fn critic_loss_decreases_on_fixed_batch() {
        let mut r = stream(3, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let buf = filled_buffer(&mut r);
        let mut batch = buf.sample(32, &mut r).unwrap();
        batch.dones = alloc::vec![1.0; 32];
        let first = agent.critic_update(&batch, &mut r).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = agent.critic_update(&batch, &mut r).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn alpha_rises_when_entropy_is_too_low() {
        let mut r = stream(4, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let a0 = agent.alpha();
        // log π well above −H̄ means entropy below target
        agent.alpha_update(5.0).unwrap();
        assert!(agent.alpha() > a0);
        agent.alpha_update(-5.0).unwrap();
        agent.alpha_update(-5.0).unwrap();
        agent.alpha_update(-5.0).unwrap();
        assert!(agent.alpha() < a0 * 1.01);
        assert!(agent.alpha_update(f64::NAN).is_err());
    }

    #[test]
    fn actor_update_moves_router_and_keeps_log_std_bounded() {
        let mut r = stream(5, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let buf = filled_buffer(&mut r);
        let router0 = agent.policy.router().clone();
        for _ in 0..20 {
            let batch = buf.sample(16, &mut r).unwrap();
            let stats = agent.update(&batch, true, &mut r).unwrap();
            assert!(stats.actor.unwrap().actor_loss.is_finite());
        }
        assert_ne!(agent.policy.router(), &router0);
        let (lo, hi) = agent.policy.log_std_bounds();
        for m in 0..3 {
            assert!(agent.policy.expert_log_std(m).values().iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn polyak_moves_targets_by_tau() {
        let mut r = stream(6, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let buf = filled_buffer(&mut r);
        let batch = buf.sample(16, &mut r).unwrap();
        let before = agent.target_critics[0].clone();
        agent.critic_update(&batch, &mut r).unwrap();
        agent.polyak_update();
        let (t, o, b) = (&agent.target_critics[0], &agent.critics[0], &before);
        for ((tt, ot), bt) in t.tensors().iter().zip(o.tensors()).zip(b.tensors()) {
            for ((x, y), z) in tt.values().iter().zip(ot.values()).zip(bt.values()) {
                assert!((x - (0.995 * z + 0.005 * y)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn myopic_targets_are_rewards() {
        let mut r = stream(7, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        agent.gamma = 0.0;
        let buf = filled_buffer(&mut r);
        let batch = buf.sample(8, &mut r).unwrap();
        assert_eq!(agent.critic_targets(&batch, &mut r).unwrap(), batch.rewards);
    }

    #[test]
    fn alpha_is_fixed_at_target_entropy() {
        let mut r = stream(8, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        let a0 = agent.alpha();
        agent.alpha_update(-agent.target_entropy()).unwrap();
        assert_eq!(agent.alpha(), a0);
    }

    #[test]
    fn alpha_first_step_by_hand() {
        let mut r = stream(9, rng::STREAM_INIT);
        let mut agent = SacAgent::new(2, 1, &small_config(), &mut r).unwrap();
        // grad of −log α·(log π + H̄) is −(5 − 1) = −4; Adam's first step is lr·g/(|g| + ε)
        let loss = agent.alpha_update(5.0).unwrap();
        assert_eq!(loss, 0.0);
        let want = libm::exp(1e-3 * 4.0 / (4.0 + 1e-8));
        assert!((agent.alpha() - want).abs() < 1e-15, "{}", agent.alpha());
    }

    #[test]
    fn flat_objective_leaves_actor_unchanged() {
        let mut r = stream(10, rng::STREAM_INIT);
        let cfg = SacConfig { lambda: 0.0, ..small_config() };
        let mut agent = SacAgent::new(2, 1, &cfg, &mut r).unwrap();
        agent.log_alpha = Tensor::vector(alloc::vec![-1000.0]);
        assert_eq!(agent.alpha(), 0.0);
        for c in &mut agent.critics {
            for t in c.tensors_mut() {
                t.values_mut().fill(0.0);
            }
        }
        let before = agent.policy.clone();
        let buf = filled_buffer(&mut r);
        let stats = agent.actor_update(&buf.states(), &mut r).unwrap();
        assert_eq!(stats.aux_loss, 0.0);
        assert_eq!(agent.policy, before);
    }

    /// Actor loss with the router replaced by `router`. With `frozen`, the gate
    /// is `frozen + softmax`, the first-order soft surrogate whose gradient the
    /// straight-through gate reports.
    fn surrogate_loss(
        agent: &SacAgent,
        router: &Tensor,
        frozen: Option<&Tensor>,
        states: &Tensor,
        noise: &(Tensor, Tensor),
    ) -> (f64, Vec<f64>, Tensor) {
        let mut policy = agent.policy.clone();
        *policy.router_mut() = router.clone();
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true).unwrap();
        let s = g.constant(states.clone()).unwrap();
        let logits = g.affine(s, bound.router, None).unwrap();
        let nv = g.constant(noise.0.clone()).unwrap();
        let gated = g.add(logits, nv).unwrap();
        let pref = g.softmax_rows(gated);
        let pref_value = g.value(pref).clone();
        let gate = match frozen {
            None => g.straight_through_top1(pref),
            Some(c) => {
                let cv = g.constant(c.clone()).unwrap();
                g.add(cv, pref).unwrap()
            }
        };
        let one_hot = g.value(gate).clone();
        let smp = bound.sample_gated(&mut g, s, logits, gate, &noise.1).unwrap();
        let (_, _, total) = agent.actor_objective(&mut g, s, &smp).unwrap();
        g.backward(total).unwrap();
        let mut offset = one_hot;
        for (o, p) in offset.values_mut().iter_mut().zip(pref_value.values()) {
            *o -= p;
        }
        (g.scalar(total), g.grad(bound.router).unwrap().to_vec(), offset)
    }

    #[test]
    fn actor_router_gradient_matches_surrogate_differences() {
        let mut r = stream(11, rng::STREAM_INIT);
        let cfg = SacConfig { critic_hidden: alloc::vec![4], lambda: 0.1, ..small_config() };
        let agent = SacAgent::new(2, 1, &cfg, &mut r).unwrap();
        let vals: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let states = Tensor::matrix(8, 2, vals).unwrap();
        let noise = agent.draw_noise(8, &mut r).unwrap();
        let router = agent.policy.router().clone();
        let (_, grad, offset) = surrogate_loss(&agent, &router, None, &states, &noise);
        let h = 1e-4;
        for k in 0..router.len() {
            let mut up = router.clone();
            up.values_mut()[k] += h;
            let mut down = router.clone();
            down.values_mut()[k] -= h;
            let fu = surrogate_loss(&agent, &up, Some(&offset), &states, &noise).0;
            let fd = surrogate_loss(&agent, &down, Some(&offset), &states, &noise).0;
            let numeric = (fu - fd) / (2.0 * h);
            let rel = (numeric - grad[k]).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "entry {k}: analytic {} numeric {numeric}", grad[k]);
        }
    }
}
