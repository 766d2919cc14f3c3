//! Core domain types: augmented states and actions, transitions, trajectories.
//!
//! An augmented state is the policy input `[goal; env state; previous cue;
//! memory]` and an augmented action is the policy output `[cue; memory; env
//! action]`. Memory is modelled as a canonically ordered set of revealed
//! environment facts rather than a free-form transcript.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardBreakdown;

/// Identifier of a task goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalId(pub u16);

/// A task goal as published by a world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: GoalId,
    pub descriptor: String,
}

/// Maximum number of environment features carried by an [`EnvState`].
pub const ENCODING_LEN: usize = 6;

/// Raw feature vector of an environment state.
pub type Encoding = [u8; ENCODING_LEN];

/// A canonical environment state.
///
/// `id` is the position of `encoding` in the sorted list of reachable
/// encodings of the world, so equality of ids and equality of encodings
/// coincide within one world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub id: u32,
    pub encoding: Encoding,
}

/// Coarse action category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Move,
    Inspect,
    Pick,
    Open,
    Query,
    Buy,
    StepBack,
}

/// An executable environment action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvAction {
    MoveLeft,
    MoveRight,
    StepBack,
    OpenDoor,
    Inspect(u16),
    Pick(u16),
    Query(u16),
    Buy(u16),
}

impl EnvAction {
    pub fn kind(self) -> ActionKind {
        match self {
            EnvAction::MoveLeft | EnvAction::MoveRight => ActionKind::Move,
            EnvAction::StepBack => ActionKind::StepBack,
            EnvAction::OpenDoor => ActionKind::Open,
            EnvAction::Inspect(_) => ActionKind::Inspect,
            EnvAction::Pick(_) => ActionKind::Pick,
            EnvAction::Query(_) => ActionKind::Query,
            EnvAction::Buy(_) => ActionKind::Buy,
        }
    }

    /// Wire name without argument.
    pub fn base_name(self) -> &'static str {
        match self {
            EnvAction::MoveLeft => "move_left",
            EnvAction::MoveRight => "move_right",
            EnvAction::StepBack => "step_back",
            EnvAction::OpenDoor => "open_door",
            EnvAction::Inspect(_) => "inspect_panel",
            EnvAction::Pick(_) => "pick_key",
            EnvAction::Query(_) => "query",
            EnvAction::Buy(_) => "buy_item",
        }
    }

    pub fn argument(self) -> Option<u16> {
        match self {
            EnvAction::Inspect(a) | EnvAction::Pick(a) | EnvAction::Query(a) | EnvAction::Buy(a) => {
                Some(a)
            }
            _ => None,
        }
    }

    /// Rebuilds an action from its wire name and optional argument.
    pub fn from_parts(name: &str, arg: Option<u16>) -> Option<EnvAction> {
        let action = match (name, arg) {
            ("move_left", None) => EnvAction::MoveLeft,
            ("move_right", None) => EnvAction::MoveRight,
            ("step_back", None) => EnvAction::StepBack,
            ("open_door", None) => EnvAction::OpenDoor,
            ("inspect_panel", Some(a)) => EnvAction::Inspect(a),
            ("pick_key", Some(a)) => EnvAction::Pick(a),
            ("query", Some(a)) => EnvAction::Query(a),
            ("buy_item", Some(a)) => EnvAction::Buy(a),
            _ => return None,
        };
        Some(action)
    }
}

impl fmt::Display for EnvAction {
    /// Canonical wire form, e.g. `move_left` or `inspect_panel_1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.argument() {
            Some(a) => write!(f, "{}_{}", self.base_name(), a),
            None => f.write_str(self.base_name()),
        }
    }
}

/// Declared exploration intent: either a probe target or "no exploration".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExplorationCue {
    None,
    Probe(u16),
}

impl ExplorationCue {
    /// Dense code: 0 for `None`, `p + 1` for `Probe(p)`.
    pub fn code(self) -> u16 {
        match self {
            ExplorationCue::None => 0,
            ExplorationCue::Probe(p) => p + 1,
        }
    }

    pub fn from_code(code: u16) -> Self {
        match code {
            0 => ExplorationCue::None,
            c => ExplorationCue::Probe(c - 1),
        }
    }
}

/// Value tag of a fact that records a previously visited state (used by the
/// rollback directive) rather than an observed environment value.
pub const TRACE_VALUE: u16 = u16::MAX;

/// A revealed environment fact: the state that revealed it and the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub source: u32,
    pub value: u16,
}

impl Fact {
    pub fn trace(state: &EnvState) -> Fact {
        Fact { source: state.id, value: TRACE_VALUE }
    }
}

/// Canonically ordered, duplicate-free set of facts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemoryState {
    facts: Vec<Fact>,
}

impl MemoryState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_facts(facts: impl IntoIterator<Item = Fact>) -> Self {
        let mut facts: Vec<Fact> = facts.into_iter().collect();
        facts.sort_unstable();
        facts.dedup();
        MemoryState { facts }
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains(&self, fact: &Fact) -> bool {
        self.facts.binary_search(fact).is_ok()
    }

    /// Returns a copy with `fact` inserted (no-op if already present).
    pub fn with(&self, fact: Fact) -> MemoryState {
        let mut facts = self.facts.clone();
        if let Err(pos) = facts.binary_search(&fact) {
            facts.insert(pos, fact);
        }
        MemoryState { facts }
    }

    pub fn is_subset_of(&self, other: &MemoryState) -> bool {
        self.facts.iter().all(|f| other.contains(f))
    }
}

/// Policy input `[goal; env state; previous cue; memory]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedState {
    pub goal: GoalId,
    pub env: EnvState,
    pub cue: ExplorationCue,
    pub memory: MemoryState,
}

impl AugmentedState {
    pub fn initial(goal: GoalId, env: EnvState) -> Self {
        AugmentedState { goal, env, cue: ExplorationCue::None, memory: MemoryState::empty() }
    }

    /// Canonical little-endian byte layout:
    /// `goal:u16 | state id:u32 | cue code:u16 | fact count:u16 | (source:u32, value:u16)*`.
    /// Facts are emitted in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 6 * self.memory.len());
        out.extend_from_slice(&self.goal.0.to_le_bytes());
        out.extend_from_slice(&self.env.id.to_le_bytes());
        out.extend_from_slice(&self.cue.code().to_le_bytes());
        out.extend_from_slice(&(self.memory.len() as u16).to_le_bytes());
        for fact in self.memory.facts() {
            out.extend_from_slice(&fact.source.to_le_bytes());
            out.extend_from_slice(&fact.value.to_le_bytes());
        }
        out
    }

    /// Inverse of [`AugmentedState::to_bytes`]. The environment encoding is
    /// not part of the byte layout, so the caller resolves state ids.
    pub fn from_bytes(bytes: &[u8], resolve: impl Fn(u32) -> Option<EnvState>) -> Result<Self> {
        let bad = |what: &str| Error::Encoding(what.to_string());
        let u16_at = |i: usize| -> Result<u16> {
            bytes
                .get(i..i + 2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .ok_or_else(|| bad("truncated"))
        };
        let u32_at = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| bad("truncated"))
        };
        let goal = GoalId(u16_at(0)?);
        let env = resolve(u32_at(2)?).ok_or_else(|| bad("unknown state id"))?;
        let cue = ExplorationCue::from_code(u16_at(6)?);
        let count = u16_at(8)? as usize;
        if bytes.len() != 10 + 6 * count {
            return Err(bad("length does not match fact count"));
        }
        let facts = (0..count)
            .map(|k| Ok(Fact { source: u32_at(10 + 6 * k)?, value: u16_at(14 + 6 * k)? }))
            .collect::<Result<Vec<_>>>()?;
        let memory = MemoryState::from_facts(facts.iter().copied());
        if memory.facts() != facts.as_slice() {
            return Err(bad("facts not in canonical order"));
        }
        Ok(AugmentedState { goal, env, cue, memory })
    }
}

/// Policy output `[cue; memory; env action]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedAction {
    pub cue: ExplorationCue,
    pub memory: MemoryState,
    pub act: EnvAction,
}

/// One step `(s̃_t, ã_t, s̃_{t+1})` of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s_tilde: AugmentedState,
    pub a_tilde: AugmentedAction,
    pub s_tilde_next: AugmentedState,
    pub step: usize,
    pub depth: usize,
    /// 1 on the step that completes the task, else 0.
    pub env_reward: f64,
    /// Whether the emitted wire text parsed under the output template.
    pub format_ok: bool,
    pub reward: Option<RewardBreakdown>,
}

impl Transition {
    pub fn total(&self) -> Result<f64> {
        self.reward.map(|r| r.total).ok_or(Error::RewardUnset(self.step))
    }
}

/// A rollout: chained transitions plus the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub success: bool,
    pub horizon_used: usize,
    pub episode_seed: u64,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, success: bool, episode_seed: u64) -> Self {
        let horizon_used = transitions.len();
        Trajectory { transitions, success, horizon_used, episode_seed }
    }

    /// Environment states in visiting order, including the final state.
    pub fn env_states(&self) -> Vec<EnvState> {
        let mut states: Vec<EnvState> = self.transitions.iter().map(|t| t.s_tilde.env).collect();
        if let Some(last) = self.transitions.last() {
            states.push(last.s_tilde_next.env);
        }
        states
    }

    fn totals(&self) -> Result<Vec<f64>> {
        self.transitions.iter().map(Transition::total).collect()
    }
}

/// Number of earlier occurrences of `current` in `history`.
pub fn visitation_depth(history: &[EnvState], current: &EnvState) -> usize {
    history.iter().filter(|s| *s == current).count()
}

/// `Σ_t γ^t · R_total(t)` with `t` counted from 1.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> Result<f64> {
    let totals = traj.totals()?;
    let mut discount = 1.0;
    Ok(totals
        .iter()
        .map(|r| {
            discount *= gamma;
            discount * r
        })
        .sum())
}

/// `Σ_{i≥t} γ^{i−t} · R_total(i)`.
pub fn reward_to_go(traj: &Trajectory, t: usize, gamma: f64) -> Result<f64> {
    let len = traj.transitions.len();
    if t >= len {
        return Err(Error::StepOutOfRange { index: t, len });
    }
    let totals = traj.totals()?;
    Ok(discounted_suffix_sums(&totals[t..], gamma)[0])
}

/// Suffix sums `G_i = r_i + γ G_{i+1}` for every position of `rewards`.
pub fn discounted_suffix_sums(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardBreakdown;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn state(id: u32) -> EnvState {
        EnvState { id, encoding: [id as u8, 0, 0, 0, 0, 0] }
    }

    fn traj_with_totals(totals: &[f64]) -> Trajectory {
        let transitions = totals
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition {
                s_tilde: AugmentedState::initial(GoalId(0), state(i as u32)),
                a_tilde: AugmentedAction {
                    cue: ExplorationCue::None,
                    memory: MemoryState::empty(),
                    act: EnvAction::MoveRight,
                },
                s_tilde_next: AugmentedState::initial(GoalId(0), state(i as u32 + 1)),
                step: i,
                depth: 0,
                env_reward: 0.0,
                format_ok: true,
                reward: Some(RewardBreakdown { task: r, format: 0, explore: 0.0, total: r }),
            })
            .collect();
        Trajectory::new(transitions, false, 0)
    }

    #[test]
    fn visitation_depth_examples() {
        let (a, b) = (state(0), state(1));
        assert_eq!(visitation_depth(&[a, b], &a), 1);
        assert_eq!(visitation_depth(&[], &a), 0);
    }

    #[test]
    fn visitation_depth_matches_recount() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<EnvState> = (0..20).map(|_| state(rng.gen_range(0..3))).collect();
        for t in 0..seq.len() {
            let mut recount = 0;
            for k in 0..t {
                if seq[k].id == seq[t].id && seq[k].encoding == seq[t].encoding {
                    recount += 1;
                }
            }
            assert_eq!(visitation_depth(&seq[..t], &seq[t]), recount);
        }
    }

    #[test]
    fn trajectory_return_examples() {
        assert!((trajectory_return(&traj_with_totals(&[2.0]), 0.9).unwrap() - 1.8).abs() < 1e-12);
        assert_eq!(trajectory_return(&traj_with_totals(&[0.0, 0.0]), 0.9).unwrap(), 0.0);
        let r = trajectory_return(&traj_with_totals(&[1.0, 1.0, 1.0]), 0.5).unwrap();
        assert!((r - 0.875).abs() < 1e-12);
    }

    #[test]
    fn unset_reward_is_an_error() {
        let mut traj = traj_with_totals(&[1.0, 1.0]);
        traj.transitions[1].reward = None;
        assert_eq!(trajectory_return(&traj, 0.9), Err(Error::RewardUnset(1)));
        assert!(reward_to_go(&traj, 0, 0.9).is_err());
    }

    #[test]
    fn reward_to_go_examples() {
        let traj = traj_with_totals(&[0.0, 0.0, 1.0]);
        assert!((reward_to_go(&traj, 0, 0.9).unwrap() - 0.81).abs() < 1e-12);
        assert_eq!(reward_to_go(&traj, 2, 0.9).unwrap(), 1.0);
        assert!(matches!(reward_to_go(&traj, 3, 0.9), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn reward_to_go_agrees_with_return() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let len = rng.gen_range(1..12);
            let totals: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let gamma = rng.gen_range(0.05..1.0);
            let traj = traj_with_totals(&totals);
            let lhs = trajectory_return(&traj, gamma).unwrap();
            let rhs = gamma * reward_to_go(&traj, 0, gamma).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn reward_to_go_recursion(totals in prop::collection::vec(-3.0f64..3.0, 2..15), gamma in 0.01f64..1.0) {
            let traj = traj_with_totals(&totals);
            for (t, total) in totals.iter().enumerate().take(totals.len() - 1) {
                let lhs = reward_to_go(&traj, t, gamma).unwrap();
                let rhs = total + gamma * reward_to_go(&traj, t + 1, gamma).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn augmented_state_bytes_roundtrip(goal in 0u16..4, id in 0u32..40, cue in 0u16..5,
                                           facts in prop::collection::vec((0u32..40, 0u16..3), 0..8)) {
            let s = AugmentedState {
                goal: GoalId(goal),
                env: state(id),
                cue: ExplorationCue::from_code(cue),
                memory: MemoryState::from_facts(facts.into_iter().map(|(source, value)| Fact { source, value })),
            };
            let bytes = s.to_bytes();
            let back = AugmentedState::from_bytes(&bytes, |i| Some(state(i))).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn memory_is_canonical() {
        let f = |s, v| Fact { source: s, value: v };
        let a = MemoryState::from_facts([f(3, 1), f(1, 0), f(3, 1)]);
        let b = MemoryState::empty().with(f(1, 0)).with(f(3, 1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(MemoryState::empty().is_subset_of(&a));
    }

    #[test]
    fn action_names() {
        assert_eq!(EnvAction::Inspect(1).to_string(), "inspect_panel_1");
        assert_eq!(EnvAction::StepBack.to_string(), "step_back");
        assert_eq!(EnvAction::from_parts("pick_key", Some(0)), Some(EnvAction::Pick(0)));
        assert_eq!(EnvAction::from_parts("pick_key", None), None);
    }
}
