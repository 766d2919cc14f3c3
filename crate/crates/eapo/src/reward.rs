//! Reward modules: the variational exploration-memory density `q_φ(e, m | s)`,
//! the Bayesian exploratory reward, total reward composition, the online
//! rollout reward and the lower-bound checker.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{AugmentedState, EnvState, ExplorationCue, GoalId, MemoryState, Transition};
use crate::par;
use crate::policy::{log_softmax, sample_index, softmax, PolicyParams};
use crate::rng::{self, domain, StreamRng};
use crate::worlds::{ExactEvaluator, Hidden, PolicyEvaluator, World};

/// Reward weights and reward-model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Format reward weight.
    pub alpha1: f64,
    /// Exploratory reward weight.
    pub alpha2: f64,
    pub gamma: f64,
    /// Temperature on the expected Q term of the reward-model objective.
    pub beta: f64,
    pub q_lr: f64,
    /// Rollouts per Q estimate.
    pub q_rollouts: usize,
    /// (cue, memory) pairs sampled per state per reward-model step.
    pub q_pairs: usize,
    /// Discount of the task return used as Q.
    pub q_gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha1: 0.5,
            alpha2: 1.0,
            gamma: 0.9,
            beta: 1.0,
            q_lr: 1e-4,
            q_rollouts: 8,
            q_pairs: 8,
            q_gamma: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha1, self.alpha2, self.gamma, self.beta, self.q_lr, self.q_gamma];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha1, alpha2 and beta must be non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.q_gamma > 0.0 && self.q_gamma <= 1.0) {
            return Err(Error::Config("discounts must lie in (0, 1]".into()));
        }
        if self.q_rollouts == 0 || self.q_pairs < 2 {
            return Err(Error::Config("need q_rollouts >= 1 and q_pairs >= 2".into()));
        }
        Ok(())
    }
}

/// Per-transition reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task: f64,
    pub format: u8,
    pub explore: f64,
    pub total: f64,
}

/// `task + α1·format + α2·explore`.
pub fn total_reward(weights: &RewardWeights, task: f64, format: u8, explore: f64) -> RewardBreakdown {
    RewardBreakdown {
        task,
        format,
        explore,
        total: task + weights.alpha1 * f64::from(format) + weights.alpha2 * explore,
    }
}

/// `max{q1, γ²·q2}`: exploitation density versus the discounted density of
/// the memory extended with the next observation.
pub fn bayes_explore(q1: f64, q2: f64, gamma: f64) -> f64 {
    q1.max(gamma * gamma * q2)
}

/// Categorical density over (cue, memory) pairs per environment state.
///
/// The support of every row is `cues × consistent memories` of the world,
/// indexed `cue * |memories| + memory`. The prior is the frozen
/// initialisation, uniform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub logits: BTreeMap<u32, Vec<f64>>,
    prior: BTreeMap<u32, Vec<f64>>,
}

impl RewardModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn support_len(world: &World) -> usize {
        world.cue_count() as usize * world.consistent_memories().len()
    }

    pub fn pair_index(world: &World, cue: ExplorationCue, memory: &MemoryState) -> Option<usize> {
        let m = world.memory_index(memory)?;
        (cue.code() < world.cue_count()).then(|| cue.code() as usize * world.consistent_memories().len() + m)
    }

    pub fn pair_at(world: &World, index: usize) -> (ExplorationCue, MemoryState) {
        let n = world.consistent_memories().len();
        (ExplorationCue::from_code((index / n) as u16), world.consistent_memories()[index % n].clone())
    }

    pub fn row_logits(&self, world: &World, s: &EnvState) -> Vec<f64> {
        let len = Self::support_len(world);
        self.logits.get(&s.id).filter(|r| r.len() == len).cloned().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn prior_logits(&self, world: &World, s: &EnvState) -> Vec<f64> {
        let len = Self::support_len(world);
        self.prior.get(&s.id).filter(|r| r.len() == len).cloned().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn row_probs(&self, world: &World, s: &EnvState) -> Vec<f64> {
        softmax(&self.row_logits(world, s))
    }

    /// `q(e, m | s)`.
    pub fn q_density(&self, world: &World, s: &EnvState, cue: ExplorationCue, memory: &MemoryState) -> Result<f64> {
        let i = Self::pair_index(world, cue, memory)
            .ok_or_else(|| Error::Inadmissible(format!("(cue {:?}, memory {:?})", cue, memory.facts())))?;
        Ok(self.row_probs(world, s)[i])
    }

    /// `KL(q(·|s) ‖ prior(·|s))`.
    pub fn kl_to_prior(&self, world: &World, s: &EnvState) -> f64 {
        crate::policy::kl_logits(&self.row_logits(world, s), &self.prior_logits(world, s))
    }

    /// Bayesian exploratory reward of a transition; inadmissible pairs score 0.
    pub fn explore_reward(&self, world: &World, tr: &Transition, gamma: f64) -> f64 {
        let s = &tr.s_tilde.env;
        let (e, m) = (tr.s_tilde.cue, &tr.s_tilde.memory);
        let q1 = self.q_density(world, s, e, m).unwrap_or(0.0);
        let q2 = match world.observation_fact(&tr.s_tilde_next.env) {
            Some(fact) => self.q_density(world, s, e, &m.with(fact)).unwrap_or(0.0),
            None => q1,
        };
        bayes_explore(q1, q2, gamma)
    }

    /// Ascends `β·E_q[Q] − KL(q ‖ prior)` on every state of the batch.
    /// Returns the objective estimate of each step (mean over states).
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        policy: &PolicyParams,
        world: &World,
        states: &[(GoalId, EnvState)],
        weights: &RewardWeights,
        steps: usize,
        stream_key: u64,
    ) -> Result<Vec<f64>> {
        let states: Vec<(GoalId, EnvState)> = states.iter().copied().filter(|(_, s)| !world.is_terminal(s)).collect();
        let mut trace = Vec::with_capacity(steps);
        if states.is_empty() {
            return Ok(trace);
        }
        let n = weights.q_pairs;
        let n = if weights.beta == 0.0 { 0 } else { n };
        for step in 0..steps {
            // Draw pairs from the current q, then estimate Q for all of them.
            let mut jobs = Vec::with_capacity(states.len() * n);
            for (si, (goal, s)) in states.iter().enumerate() {
                let probs = self.row_probs(world, s);
                let mut rng = rng::stream(&[stream_key, domain::REWARD_MODEL, step as u64, si as u64]);
                for j in 0..n {
                    let pick = sample_index(&probs, &mut rng);
                    jobs.push((si, j, *goal, *s, pick));
                }
            }
            let estimates = par::map(&jobs, |&(si, j, goal, s, pick)| {
                let (cue, memory) = Self::pair_at(world, pick);
                let mut rng = rng::stream(&[stream_key, domain::REWARD_MODEL, step as u64, si as u64, j as u64 + 1]);
                estimate_q_value(policy, world, goal, &s, cue, &memory, weights.q_rollouts, weights.q_gamma, &mut rng)
            });
            let estimates = estimates.into_iter().collect::<Result<Vec<f64>>>()?;
            let mut objective = 0.0;
            for (si, (_, s)) in states.iter().enumerate() {
                let qs = &estimates[si * n..(si + 1) * n];
                let picks: Vec<usize> = jobs[si * n..(si + 1) * n].iter().map(|j| j.4).collect();
                let baseline = if n == 0 { 0.0 } else { qs.iter().sum::<f64>() / n as f64 };
                let logits = self.row_logits(world, s);
                let prior = self.prior_logits(world, s);
                let lq = log_softmax(&logits);
                let lp = log_softmax(&prior);
                let q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
                let kl: f64 = (0..q.len()).map(|i| q[i] * (lq[i] - lp[i])).sum();
                let mut grad: Vec<f64> = (0..q.len()).map(|i| -q[i] * (lq[i] - lp[i] - kl)).collect();
                if weights.beta != 0.0 {
                    for (&pick, &value) in picks.iter().zip(qs) {
                        let scale = weights.beta * (value - baseline) / n as f64;
                        for (i, g) in grad.iter_mut().enumerate() {
                            *g += scale * (f64::from(u8::from(i == pick)) - q[i]);
                        }
                    }
                }
                let row = self.logits.entry(s.id).or_insert(logits);
                for (z, g) in row.iter_mut().zip(&grad) {
                    *z += weights.q_lr * g;
                }
                objective += weights.beta * baseline - kl;
            }
            trace.push(objective / states.len() as f64);
        }
        Ok(trace)
    }
}

/// Monte-Carlo estimate of the task return after conditioning on `(e, m)`
/// at `s`: hidden facts are drawn from the posterior given `(s, m)` and the
/// policy acts from `[g; s; e; m]` for a full horizon.
#[allow(clippy::too_many_arguments)]
pub fn estimate_q_value(
    policy: &PolicyParams,
    world: &World,
    goal: GoalId,
    s: &EnvState,
    cue: ExplorationCue,
    memory: &MemoryState,
    rollouts: usize,
    gamma: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    if world.is_terminal(s) || rollouts == 0 {
        return Ok(0.0);
    }
    let posterior = world.posterior(goal, s, memory);
    if posterior.is_empty() {
        return Ok(0.0);
    }
    let start = AugmentedState { goal, env: *s, cue, memory: memory.clone() };
    let mut total = 0.0;
    for _ in 0..rollouts {
        let h = posterior[rng.gen_range(0..posterior.len())];
        total += rollout_return(policy, world, h, start.clone(), 0, gamma, rng)?;
    }
    Ok(total / rollouts as f64)
}

/// Discounted sparse task return `Σ_i γ^i r_i` of one rollout from `start`.
pub fn rollout_return(
    policy: &PolicyParams,
    world: &World,
    hidden: Hidden,
    start: AugmentedState,
    steps_used: usize,
    gamma: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut s = start;
    let mut discount = 1.0;
    for _ in steps_used..world.horizon() {
        if world.is_terminal(&s.env) {
            break;
        }
        let a = policy.sample(world, &s, rng)?.action;
        let r = world.transition(&s.env, a.act, hidden, s.goal)?;
        if r.success {
            return Ok(discount);
        }
        if r.terminal {
            break;
        }
        discount *= gamma;
        s = AugmentedState { goal: s.goal, env: r.next, cue: a.cue, memory: a.memory };
    }
    Ok(0.0)
}

/// Components of the online exploratory reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineReward {
    /// Mean direct-continuation return.
    pub r1: f64,
    /// Mean rollback-then-refined return, absent without a verified rollback.
    pub r2: Option<f64>,
    pub value: f64,
}

/// `max{R1, R2}` for a transition taken at step `steps_used` of an episode
/// with hidden facts `hidden`, each term averaged over `k` continuations.
///
/// The rollback action is the policy's greedy rollback, accepted only if
/// executing it restores the previous state.
#[allow(clippy::too_many_arguments)]
pub fn online_exploratory_reward(
    policy: &PolicyParams,
    world: &World,
    hidden: Hidden,
    tr: &Transition,
    steps_used: usize,
    gamma: f64,
    k: usize,
    rng: &mut StreamRng,
) -> Result<OnlineReward> {
    let k = k.max(1);
    let r_t = tr.env_reward;
    let next = &tr.s_tilde_next;
    let terminal_next = world.is_terminal(&next.env);
    let mut r1 = 0.0;
    for _ in 0..k {
        let tail = if terminal_next { 0.0 } else { rollout_return(policy, world, hidden, next.clone(), steps_used + 1, gamma, rng)? };
        r1 += r_t + gamma * tail;
    }
    r1 /= k as f64;

    let mut r2 = None;
    if !terminal_next && steps_used + 1 < world.horizon() {
        let s_t = tr.s_tilde.env;
        let a_r = policy.greedy_rollback(world, &next.env, &s_t)?;
        let back = world.transition(&next.env, a_r, hidden, next.goal)?;
        if back.next == s_t {
            let r_back = if back.success { 1.0 } else { 0.0 };
            let refined_memory = match world.observation_fact(&next.env) {
                Some(f) if next.memory.len() < world.memory_cap() || next.memory.contains(&f) => next.memory.with(f),
                _ => next.memory.clone(),
            };
            let refined = AugmentedState { goal: next.goal, env: s_t, cue: next.cue, memory: refined_memory };
            let mut sum = 0.0;
            for _ in 0..k {
                let tail = rollout_return(policy, world, hidden, refined.clone(), steps_used + 2, gamma, rng)?;
                sum += r_t + gamma * r_back + gamma * gamma * tail;
            }
            r2 = Some(sum / k as f64);
        }
    }
    let value = r2.map_or(r1, |r2| r1.max(r2));
    Ok(OnlineReward { r1, r2, value })
}

/// Terms of the variational lower bound on `log π(success | s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboGap {
    pub lower_bound: f64,
    pub exact: f64,
    /// `E_q[log π(success | s, e, m)]`.
    pub expectation: f64,
    /// `KL(q ‖ π(e, m | s))`.
    pub kl: f64,
}

impl ElboGap {
    pub fn gap(&self) -> f64 {
        self.exact - self.lower_bound
    }
}

/// Lower bound and exact log success probability at `[g; s; none; ∅]` for a
/// variational density `q`, restricted and renormalised to the policy's
/// emission support.
pub fn elbo_with<P: PolicyEvaluator + ?Sized>(
    policy: &P,
    world: &World,
    goal: GoalId,
    s: &EnvState,
    q: impl Fn(ExplorationCue, &MemoryState) -> f64,
) -> Result<ElboGap> {
    let ctx = AugmentedState::initial(goal, *s);
    let mut ev = ExactEvaluator::new(world, policy);
    let mut emissions = Vec::new();
    for (cue, pc) in policy.cue_distribution(world, &ctx) {
        for (memory, pm) in policy.memory_distribution(world, &ctx, cue) {
            let pi = pc * pm;
            if pi > 0.0 {
                let success = ev.success_given_emission(&ctx, cue, &memory, world.horizon())?;
                emissions.push((pi, q(cue, &memory), success));
            }
        }
    }
    let exact = emissions.iter().map(|(pi, _, succ)| pi * succ).sum::<f64>().ln();
    let mass: f64 = emissions.iter().map(|e| e.1).sum();
    if mass <= 0.0 {
        return Ok(ElboGap { lower_bound: f64::NEG_INFINITY, exact, expectation: f64::NEG_INFINITY, kl: f64::INFINITY });
    }
    let mut expectation = 0.0;
    let mut kl = 0.0;
    for &(pi, qw, succ) in &emissions {
        let qn = qw / mass;
        if qn > 0.0 {
            expectation += if succ > 0.0 { qn * succ.ln() } else { f64::NEG_INFINITY };
            kl += qn * (qn.ln() - pi.ln());
        }
    }
    Ok(ElboGap { lower_bound: expectation - kl, exact, expectation, kl })
}

/// [`elbo_with`] using the learned reward model as `q`.
pub fn elbo_gap(
    policy: &PolicyParams,
    model: &RewardModel,
    world: &World,
    goal: GoalId,
    s: &EnvState,
) -> Result<ElboGap> {
    let probs = model.row_probs(world, s);
    elbo_with(policy, world, goal, s, |cue, memory| {
        RewardModel::pair_index(world, cue, memory).map_or(0.0, |i| probs[i])
    })
}
