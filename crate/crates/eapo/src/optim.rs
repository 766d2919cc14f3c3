//! Rollout collection, visitation-depth grouping, group-normalised
//! advantages and the two-stage training loop (rollback fine-tuning, then
//! alternating reward-model and policy updates).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{reward_to_go, visitation_depth, AugmentedState, EnvState, GoalId, Trajectory, Transition};
use crate::metrics::{self, MetricRow};
use crate::par;
use crate::policy::{policy_gradient, surrogate, PolicyParams, PolicySample, SnapshotRole, SurrogateConfig};
use crate::reward::{total_reward, RewardModel, RewardWeights};
use crate::rng::{self, domain};
use crate::structured_io;
use crate::worlds::{RollbackExample, World, WorldInstance, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Eapo,
    GrpoBaseline,
    NoGroupingAblation,
    NoExploreRewardAblation,
    NoFormatRewardAblation,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Eapo,
        Mode::GrpoBaseline,
        Mode::NoGroupingAblation,
        Mode::NoExploreRewardAblation,
        Mode::NoFormatRewardAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Eapo => "eapo",
            Mode::GrpoBaseline => "grpo-baseline",
            Mode::NoGroupingAblation => "no-grouping-ablation",
            Mode::NoExploreRewardAblation => "no-explore-reward-ablation",
            Mode::NoFormatRewardAblation => "no-format-reward-ablation",
        }
    }

    pub fn parse(name: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown mode `{name}`")))
    }

    /// Whether transitions are grouped by `(state, depth)`.
    pub fn grouped(self) -> bool {
        !matches!(self, Mode::GrpoBaseline | Mode::NoGroupingAblation)
    }

    /// Weights after the mode's ablations are applied.
    pub fn effective_weights(self, w: &RewardWeights) -> RewardWeights {
        match self {
            Mode::Eapo | Mode::NoGroupingAblation => *w,
            Mode::GrpoBaseline => RewardWeights { alpha1: 0.0, alpha2: 0.0, ..*w },
            Mode::NoExploreRewardAblation => RewardWeights { alpha2: 0.0, ..*w },
            Mode::NoFormatRewardAblation => RewardWeights { alpha1: 0.0, ..*w },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalSampling {
    RoundRobin,
    Random,
}

/// Optimisation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub mode: Mode,
    /// Rollout groups collected per epoch, each with its own goal and episode seed.
    pub groups_per_epoch: usize,
    /// Gradient steps per epoch on the same rollouts.
    pub inner_updates: usize,
    pub goal_sampling: GoalSampling,
    pub sft_lr: f64,
    pub sft_max_steps: usize,
    /// Rollback fine-tuning stops once the mean NLL falls below this value.
    pub sft_tolerance: f64,
    pub skip_sft: bool,
    /// Reward-model steps per epoch.
    pub q_steps: usize,
    /// Upper bound on distinct states used per reward-model update.
    pub q_states: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            group_size: 16,
            clip_eps: 0.2,
            kl_lambda: 0.01,
            lr: 1e-4,
            epochs: 1000,
            mode: Mode::Eapo,
            groups_per_epoch: 1,
            inner_updates: 1,
            goal_sampling: GoalSampling::RoundRobin,
            sft_lr: 1e-4,
            sft_max_steps: 1000,
            sft_tolerance: 0.05,
            skip_sft: false,
            q_steps: 1,
            q_states: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        let reals = [self.clip_eps, self.kl_lambda, self.lr, self.sft_lr, self.sft_tolerance];
        if reals.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("clip_eps, kl_lambda and learning rates must be finite and non-negative".into()));
        }
        if self.groups_per_epoch == 0 || self.inner_updates == 0 {
            return Err(Error::Config("groups_per_epoch and inner_updates must be positive".into()));
        }
        Ok(())
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig { clip_eps: self.clip_eps, kl_lambda: self.kl_lambda }
    }
}

/// Group key `(state, depth)`; [`GroupKey::flat`] marks the single group of
/// ungrouped modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub state: u32,
    pub depth: usize,
}

impl GroupKey {
    pub fn flat() -> GroupKey {
        GroupKey { state: u32::MAX, depth: usize::MAX }
    }
}

pub type Groups = BTreeMap<GroupKey, TransitionGroup>;

/// Transitions sharing a group key, as `(trajectory index, step)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionGroup {
    pub key: GroupKey,
    pub members: Vec<(usize, usize)>,
}

impl TransitionGroup {
    pub fn transitions<'a>(&'a self, trajectories: &'a [Trajectory]) -> impl Iterator<Item = &'a Transition> + 'a {
        self.members.iter().map(|&(i, t)| &trajectories[i].transitions[t])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageEstimate {
    pub value: f64,
    pub key: GroupKey,
    /// The group had zero reward spread.
    pub degenerate: bool,
}

/// Partitions transitions by `(env state, visitation depth)`.
pub fn build_groups(trajectories: &[Trajectory]) -> BTreeMap<GroupKey, TransitionGroup> {
    let mut groups: BTreeMap<GroupKey, TransitionGroup> = BTreeMap::new();
    for (i, traj) in trajectories.iter().enumerate() {
        for (t, tr) in traj.transitions.iter().enumerate() {
            let key = GroupKey { state: tr.s_tilde.env.id, depth: tr.depth };
            groups.entry(key).or_insert_with(|| TransitionGroup { key, members: Vec::new() }).members.push((i, t));
        }
    }
    groups
}

/// One group holding every transition.
pub fn flat_group(trajectories: &[Trajectory]) -> BTreeMap<GroupKey, TransitionGroup> {
    let members: Vec<(usize, usize)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.transitions.len()).map(move |s| (i, s)))
        .collect();
    let mut out = BTreeMap::new();
    if !members.is_empty() {
        out.insert(GroupKey::flat(), TransitionGroup { key: GroupKey::flat(), members });
    }
    out
}

/// Standardises rewards with the population standard deviation. A spread
/// below `1e-8` yields all-zero advantages and sets the degenerate flag.
pub fn normalize_advantages(rewards: &[f64]) -> (Vec<f64>, bool) {
    if rewards.is_empty() {
        return (Vec::new(), true);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return (vec![0.0; rewards.len()], true);
    }
    (rewards.iter().map(|r| (r - mean) / std).collect(), false)
}

/// Advantages for every member of `group` given per-member rewards.
pub fn group_advantages(group: &TransitionGroup, rewards: &[f64]) -> Vec<AdvantageEstimate> {
    let (values, degenerate) = normalize_advantages(rewards);
    values.into_iter().map(|value| AdvantageEstimate { value, key: group.key, degenerate }).collect()
}

fn think_text(s: &AugmentedState, step: usize) -> String {
    format!("step {step}: at state {} with {} remembered facts", s.env.id, s.memory.len())
}

/// Rolls out one episode; every emitted action goes through the wire format.
fn rollout(
    policy: &PolicyParams,
    world: &World,
    goal: GoalId,
    episode_seed: u64,
    stream: &[u64],
) -> Result<Trajectory> {
    let mut rng = rng::stream(stream);
    let mut inst = WorldInstance::reset(world, goal, episode_seed);
    let mut s = AugmentedState::initial(goal, inst.current());
    let mut history: Vec<EnvState> = Vec::new();
    let mut transitions = Vec::new();
    let mut success = false;
    while !inst.is_done() {
        let step = transitions.len();
        let sampled = policy.sample(world, &s, &mut rng)?;
        let text = structured_io::serialize(&sampled.action, &think_text(&s, step));
        let (a, format_ok) = match structured_io::parse(&text) {
            Ok(parsed) => (parsed, true),
            Err(_) => (sampled.action, false),
        };
        let result = inst.step(a.act)?;
        let depth = visitation_depth(&history, &s.env);
        history.push(s.env);
        let next = AugmentedState { goal, env: result.next, cue: a.cue, memory: a.memory.clone() };
        success |= result.success;
        transitions.push(Transition {
            s_tilde: s,
            a_tilde: a,
            s_tilde_next: next.clone(),
            step,
            depth,
            env_reward: if result.success { 1.0 } else { 0.0 },
            format_ok,
            reward: None,
        });
        s = next;
    }
    Ok(Trajectory::new(transitions, success, episode_seed))
}

/// `G` rollouts from the same goal and hidden placement, each with its own
/// random stream derived from `stream_key`.
pub fn collect_group_rollouts(
    policy: &PolicyParams,
    world: &World,
    goal: GoalId,
    episode_seed: u64,
    group_size: usize,
    stream_key: u64,
) -> Result<Vec<Trajectory>> {
    if group_size < 2 {
        return Err(Error::Config("group size must be at least 2".into()));
    }
    let indices: Vec<u64> = (0..group_size as u64).collect();
    par::map(&indices, |&i| rollout(policy, world, goal, episode_seed, &[stream_key, domain::ROLLOUT, i]))
        .into_iter()
        .collect()
}

/// Fills every transition's reward breakdown.
///
/// Grouped modes broadcast the discounted-to-go success `γ^{(n−1)−t}` as the
/// task component; flat modes keep the sparse per-step task reward.
pub fn assign_rewards(
    trajectories: &mut [Trajectory],
    model: &RewardModel,
    world: &World,
    weights: &RewardWeights,
    mode: Mode,
) {
    for traj in trajectories.iter_mut() {
        let n = traj.transitions.len();
        let success = traj.success;
        for (t, tr) in traj.transitions.iter_mut().enumerate() {
            let task = if mode.grouped() {
                if success { weights.gamma.powi((n - 1 - t) as i32) } else { 0.0 }
            } else {
                tr.env_reward
            };
            let explore = if weights.alpha2 > 0.0 { model.explore_reward(world, tr, weights.gamma) } else { 0.0 };
            tr.reward = Some(total_reward(weights, task, u8::from(tr.format_ok), explore));
        }
    }
}

/// Groups and per-member advantages for the rollouts of one collection.
pub fn compute_advantages(
    trajectories: &[Trajectory],
    mode: Mode,
    gamma: f64,
) -> Result<(Groups, Vec<Vec<AdvantageEstimate>>)> {
    let groups = if mode.grouped() { build_groups(trajectories) } else { flat_group(trajectories) };
    let mut advantages = Vec::with_capacity(groups.len());
    for group in groups.values() {
        let rewards = group
            .members
            .iter()
            .map(|&(i, t)| {
                if mode.grouped() {
                    trajectories[i].transitions[t].total()
                } else {
                    reward_to_go(&trajectories[i], t, gamma)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        advantages.push(group_advantages(group, &rewards));
    }
    Ok((groups, advantages))
}

/// Builds the surrogate batch, with behaviour log-probs from `old`.
pub fn policy_batch(
    trajectories: &[Trajectory],
    groups: &BTreeMap<GroupKey, TransitionGroup>,
    advantages: &[Vec<AdvantageEstimate>],
    old: &PolicyParams,
    world: &World,
) -> Result<Vec<PolicySample>> {
    let mut batch = Vec::new();
    for (group, advs) in groups.values().zip(advantages) {
        for (&(i, t), adv) in group.members.iter().zip(advs) {
            let tr = &trajectories[i].transitions[t];
            batch.push(PolicySample {
                s_tilde: tr.s_tilde.clone(),
                a_tilde: tr.a_tilde.clone(),
                advantage: adv.value,
                old_log_probs: old.log_probs(world, &tr.s_tilde, &tr.a_tilde)?,
            });
        }
    }
    Ok(batch)
}

/// Outcome of one policy epoch.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub trajectories: Vec<Trajectory>,
    /// Group size → number of transitions in groups of that size.
    pub group_size_histogram: BTreeMap<usize, usize>,
    pub groups: usize,
    pub degenerate_groups: usize,
    /// Negated surrogate after the update.
    pub policy_loss: f64,
    pub mean_task: f64,
    pub mean_format: f64,
    pub mean_explore: f64,
}

/// One epoch of policy optimisation: collect, reward, group, normalise and
/// apply the clipped update with KL to `reference`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    model: &RewardModel,
    world: &World,
    goals: &[(GoalId, u64)],
    config: &OptimConfig,
    weights: &RewardWeights,
    stream_key: u64,
) -> Result<StepReport> {
    let weights = config.mode.effective_weights(weights);
    let old = policy.snapshot(SnapshotRole::Old);
    let mut all = Vec::new();
    let mut batch = Vec::new();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut n_groups, mut degenerate) = (0, 0);
    for (b, &(goal, episode_seed)) in goals.iter().enumerate() {
        let key = rng::derive_seed(&[stream_key, b as u64]);
        let mut trajs = collect_group_rollouts(&old, world, goal, episode_seed, config.group_size, key)?;
        assign_rewards(&mut trajs, model, world, &weights, config.mode);
        let (groups, advantages) = compute_advantages(&trajs, config.mode, weights.gamma)?;
        for (group, advs) in groups.values().zip(&advantages) {
            *histogram.entry(group.members.len()).or_default() += group.members.len();
            n_groups += 1;
            degenerate += usize::from(advs.first().is_some_and(|a| a.degenerate));
        }
        batch.extend(policy_batch(&trajs, &groups, &advantages, &old, world)?);
        all.extend(trajs);
    }
    let cfg = config.surrogate();
    if !batch.is_empty() {
        for _ in 0..config.inner_updates {
            let grad = policy_gradient(policy, world, &batch, cfg, reference)?;
            policy.apply(&grad, config.lr);
        }
        if !policy.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
    }
    let policy_loss = if batch.is_empty() { 0.0 } else { -surrogate(policy, world, &batch, cfg, reference)? };
    let rewards: Vec<_> = all.iter().flat_map(|t| t.transitions.iter().filter_map(|tr| tr.reward)).collect();
    let avg = |f: &dyn Fn(&crate::reward::RewardBreakdown) -> f64| metrics::mean(&rewards.iter().map(f).collect::<Vec<_>>());
    Ok(StepReport {
        group_size_histogram: histogram,
        groups: n_groups,
        degenerate_groups: degenerate,
        policy_loss,
        mean_task: avg(&|r| r.task),
        mean_format: avg(&|r| f64::from(r.format)),
        mean_explore: avg(&|r| r.explore),
        trajectories: all,
    })
}

/// Result of the rollback fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub dataset_size: usize,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Fraction of dataset pairs whose greedy rollback restores the previous state.
    pub recovery_rate: f64,
}

/// Runs rollback fine-tuning until the loss falls below `tolerance` or
/// `max_steps` updates have been made.
pub fn run_sft(
    policy: &mut PolicyParams,
    world: &World,
    dataset: &[RollbackExample],
    lr: f64,
    max_steps: usize,
    tolerance: f64,
) -> Result<SftReport> {
    let mut losses = Vec::new();
    for _ in 0..max_steps {
        if policy.rollback_loss(world, dataset)? < tolerance {
            break;
        }
        losses.push(policy.sft_rollback_update(world, dataset, lr)?);
    }
    Ok(SftReport { dataset_size: dataset.len(), losses, recovery_rate: rollback_recovery_rate(policy, world, dataset)? })
}

/// Fraction of pairs where executing the greedy rollback lands on `s_prev`
/// under some hidden placement consistent with both states.
pub fn rollback_recovery_rate(policy: &PolicyParams, world: &World, dataset: &[RollbackExample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("rollback dataset"));
    }
    let mut ok = 0usize;
    for ex in dataset {
        let a = policy.greedy_rollback(world, &ex.s_now, &ex.s_prev)?;
        let restored = world.goals().iter().any(|g| {
            world
                .posterior(g.id, &ex.s_now, &Default::default())
                .into_iter()
                .filter(|&h| world.consistent(h, &ex.s_prev, &Default::default()))
                .any(|h| world.transition(&ex.s_now, a, h, g.id).is_ok_and(|r| r.next == ex.s_prev))
        });
        ok += usize::from(restored);
    }
    Ok(ok as f64 / dataset.len() as f64)
}

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: WorldSpec,
    pub config: OptimConfig,
    pub weights: RewardWeights,
    pub run_seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub reward_model: RewardModel,
    pub recent_states: Vec<(GoalId, EnvState)>,
    pub sft: Option<SftReport>,
}

/// Two-stage driver: rollback fine-tuning, then per epoch a reward-model
/// update on the previous epoch's states followed by a policy update.
pub struct Trainer {
    world: World,
    state: Checkpoint,
}

impl Trainer {
    pub fn new(spec: &WorldSpec, config: &OptimConfig, weights: &RewardWeights, run_seed: u64) -> Result<Trainer> {
        config.validate()?;
        weights.validate()?;
        let world = World::new(spec)?;
        Ok(Trainer {
            world,
            state: Checkpoint {
                spec: spec.clone(),
                config: config.clone(),
                weights: *weights,
                run_seed,
                epoch: 0,
                policy: PolicyParams::new(),
                reference: PolicyParams::new(),
                reward_model: RewardModel::new(),
                recent_states: Vec::new(),
                sft: None,
            },
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Trainer> {
        checkpoint.config.validate()?;
        checkpoint.weights.validate()?;
        Ok(Trainer { world: World::new(&checkpoint.spec)?, state: checkpoint })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.state.policy
    }

    pub fn reward_model(&self) -> &RewardModel {
        &self.state.reward_model
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn config(&self) -> &OptimConfig {
        &self.state.config
    }

    /// Stage one. The post-SFT policy becomes the KL reference.
    pub fn run_sft(&mut self) -> Result<SftReport> {
        let c = &self.state.config;
        let dataset = self.world.rollback_pairs();
        let report = if c.skip_sft {
            SftReport { dataset_size: dataset.len(), losses: Vec::new(), recovery_rate: 0.0 }
        } else {
            run_sft(&mut self.state.policy, &self.world, &dataset, c.sft_lr, c.sft_max_steps, c.sft_tolerance)?
        };
        self.state.reference = self.state.policy.clone();
        self.state.sft = Some(report.clone());
        Ok(report)
    }

    fn epoch_goals(&self, epoch: usize) -> Vec<(GoalId, u64)> {
        let c = &self.state.config;
        let n_goals = self.world.goals().len();
        (0..c.groups_per_epoch)
            .map(|b| {
                let slot = (epoch * c.groups_per_epoch + b) as u64;
                let goal = match c.goal_sampling {
                    GoalSampling::RoundRobin => (slot % n_goals as u64) as u16,
                    GoalSampling::Random => {
                        rng::stream(&[self.state.run_seed, domain::GOAL, slot]).gen_range(0..n_goals) as u16
                    }
                };
                (GoalId(goal), rng::derive_seed(&[self.state.run_seed, domain::EPISODE, slot]))
            })
            .collect()
    }

    /// Stage two, one epoch.
    pub fn run_epoch(&mut self) -> Result<MetricRow> {
        let epoch = self.state.epoch;
        let goals = self.epoch_goals(epoch);
        let s = &mut self.state;
        let effective = s.config.mode.effective_weights(&s.weights);
        let mut q_objective = 0.0;
        if effective.alpha2 > 0.0 && s.config.q_steps > 0 && !s.recent_states.is_empty() {
            let key = rng::derive_seed(&[s.run_seed, domain::REWARD_MODEL, epoch as u64]);
            let trace = s.reward_model.train(&s.policy, &self.world, &s.recent_states, &s.weights, s.config.q_steps, key)?;
            q_objective = metrics::mean(&trace);
        }
        let model = s.reward_model.clone();
        let key = rng::derive_seed(&[s.run_seed, domain::ROLLOUT, epoch as u64]);
        let report = train_step(&mut s.policy, &s.reference, &model, &self.world, &goals, &s.config, &s.weights, key)?;

        let mut seen = BTreeSet::new();
        s.recent_states = report
            .trajectories
            .iter()
            .flat_map(|t| t.transitions.iter().map(|tr| (tr.s_tilde.goal, tr.s_tilde.env)))
            .filter(|(g, e)| seen.insert((*g, e.id)))
            .take(s.config.q_states)
            .collect();
        s.epoch += 1;
        Ok(MetricRow {
            epoch,
            success_rate: metrics::success_rate(&report.trajectories),
            exploration_degree: metrics::exploration_degree(&report.trajectories),
            mean_episode_steps: metrics::average_episode_steps(&report.trajectories),
            reward_task: report.mean_task,
            reward_format: report.mean_format,
            reward_explore: report.mean_explore,
            group_size_histogram: report.group_size_histogram,
            policy_loss: report.policy_loss,
            reward_model_objective: q_objective,
        })
    }

    /// Goals and episode seeds used by `epoch`.
    pub fn goals_for(&self, epoch: usize) -> Vec<(GoalId, u64)> {
        self.epoch_goals(epoch)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sft: SftReport,
    pub rows: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
}

/// Full run: rollback fine-tuning, then `config.epochs` epochs.
pub fn train(spec: &WorldSpec, config: &OptimConfig, weights: &RewardWeights, run_seed: u64) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(spec, config, weights, run_seed)?;
    let sft = trainer.run_sft()?;
    let mut rows = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        rows.push(trainer.run_epoch()?);
    }
    Ok(TrainOutcome { sft, rows, checkpoint: trainer.state })
}
