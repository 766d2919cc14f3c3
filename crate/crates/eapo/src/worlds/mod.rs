//! Enumerable information-gathering worlds.
//!
//! Two topologies are provided, `key-corridor` and `shop-sim`. Both are
//! fully enumerated at construction: every reachable [`EnvState`] receives a
//! canonical id, legal action sets are tabulated and the augmented state
//! space gets a dense mixed-radix index used by the tabular policy.

mod key_corridor;
pub mod oracle;
mod shop_sim;

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    AugmentedState, Encoding, EnvAction, EnvState, ExplorationCue, Fact, Goal, GoalId, MemoryState,
    TRACE_VALUE,
};
use crate::rng::{self, StreamRng};

use key_corridor::KeyCorridor;
use shop_sim::ShopSim;

pub use oracle::{exact_success_probability, ExactEvaluator, PolicyEvaluator};

/// Default cap on the number of facts held in memory.
pub const DEFAULT_MEMORY_CAP: usize = 8;

/// Default node budget for exact enumeration.
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

/// Registered world names.
pub const WORLD_NAMES: [&str; 2] = ["key-corridor", "shop-sim"];

/// Topology and size parameters of a world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum WorldKind {
    KeyCorridor { cells: usize, panels: usize },
    ShopSim { items: usize, attributes: usize },
}

/// Serializable world description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(flatten)]
    pub kind: WorldKind,
    pub horizon: usize,
    /// Salt mixed into every episode seed.
    #[serde(default)]
    pub seed: u64,
    /// Failed `open_door`/`buy_item` ends the episode instead of costing a step.
    #[serde(default)]
    pub failure_terminal: bool,
    #[serde(default = "default_memory_cap")]
    pub memory_cap: usize,
}

fn default_memory_cap() -> usize {
    DEFAULT_MEMORY_CAP
}

impl WorldSpec {
    pub fn key_corridor(cells: usize, panels: usize, horizon: usize) -> Self {
        WorldSpec {
            kind: WorldKind::KeyCorridor { cells, panels },
            horizon,
            seed: 0,
            failure_terminal: false,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }

    pub fn shop_sim(items: usize, attributes: usize, horizon: usize) -> Self {
        WorldSpec {
            kind: WorldKind::ShopSim { items, attributes },
            horizon,
            seed: 0,
            failure_terminal: false,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }

    /// Registry lookup: `sizes` are `[cells, panels]` or `[items, attributes]`.
    pub fn by_name(name: &str, sizes: [usize; 2], horizon: usize) -> Result<Self> {
        match name {
            "key-corridor" => Ok(Self::key_corridor(sizes[0], sizes[1], horizon)),
            "shop-sim" => Ok(Self::shop_sim(sizes[0], sizes[1], horizon)),
            other => Err(Error::InvalidSpec(format!("unknown world `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            WorldKind::KeyCorridor { .. } => WORLD_NAMES[0],
            WorldKind::ShopSim { .. } => WORLD_NAMES[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        match self.kind {
            WorldKind::KeyCorridor { cells, panels } => {
                if !(2..=64).contains(&cells) {
                    return fail(format!("key-corridor needs 2 <= cells <= 64, got {cells}"));
                }
                if !(1..=16).contains(&panels) {
                    return fail(format!("key-corridor needs 1 <= panels <= 16, got {panels}"));
                }
                if self.horizon < 2 * panels + 2 {
                    return fail(format!(
                        "key-corridor horizon {} is shorter than 2*panels+2 = {}",
                        self.horizon,
                        2 * panels + 2
                    ));
                }
                if panels > self.memory_cap {
                    return fail(format!("{panels} panels exceed the memory cap {}", self.memory_cap));
                }
            }
            WorldKind::ShopSim { items, attributes } => {
                if items < 2 || attributes < 1 {
                    return fail(format!("shop-sim needs items >= 2 and attributes >= 1, got {items}x{attributes}"));
                }
                if items * attributes > self.memory_cap {
                    return fail(format!(
                        "{} item attributes exceed the memory cap {}",
                        items * attributes,
                        self.memory_cap
                    ));
                }
                if self.horizon < 2 {
                    return fail("shop-sim horizon must be at least 2".into());
                }
            }
        }
        Ok(())
    }
}

/// Hidden facts of an episode: the key panel, or the item attribute bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hidden(pub u64);

#[derive(Debug, Clone, Copy)]
pub(crate) struct Outcome {
    pub next: Encoding,
    pub terminal: bool,
    pub success: bool,
}

/// Topology-specific dynamics over raw encodings.
pub(crate) trait Dynamics {
    fn initial(&self) -> Encoding;
    fn goals(&self) -> Vec<String>;
    /// Number of probe targets; cue codes are `0..=cue_targets`.
    fn cue_targets(&self) -> u16;
    fn is_terminal(&self, enc: &Encoding) -> bool;
    fn is_success(&self, enc: &Encoding) -> bool;
    /// Legal actions in canonical order, empty on terminal states.
    fn actions(&self, enc: &Encoding) -> Vec<EnvAction>;
    /// Applies a legal action.
    fn apply(&self, enc: &Encoding, action: EnvAction, hidden: Hidden, goal: GoalId) -> Outcome;
    /// Value revealed by a state, if any.
    fn observation(&self, enc: &Encoding) -> Option<u16>;
    /// Support of the uniform prior over hidden facts.
    fn hidden_prior(&self, goal: GoalId) -> Vec<Hidden>;
    fn sample_hidden(&self, goal: GoalId, rng: &mut StreamRng) -> Hidden;
    /// Whether the state's visible content agrees with `hidden`.
    fn consistent(&self, hidden: Hidden, enc: &Encoding) -> bool;
    /// Largest memory an episode can accumulate.
    fn max_memory(&self) -> usize;
}

#[derive(Debug, Clone)]
enum Model {
    KeyCorridor(KeyCorridor),
    ShopSim(ShopSim),
}

impl Model {
    fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Model::KeyCorridor(m) => m,
            Model::ShopSim(m) => m,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResult {
    pub next: EnvState,
    pub observation: Option<Fact>,
    pub terminal: bool,
    pub success: bool,
}

/// A verified rollback example: executing `action` in `s_now` restores `s_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RollbackExample {
    pub s_now: EnvState,
    pub s_prev: EnvState,
    pub action: EnvAction,
}

/// A fully enumerated world.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    model: Model,
    goals: Vec<Goal>,
    states: Vec<EnvState>,
    index: HashMap<Encoding, u32>,
    legal: Vec<Vec<EnvAction>>,
    obs_facts: Vec<Fact>,
    fact_slot: HashMap<Fact, u32>,
    memories: Vec<MemoryState>,
    memory_slot: HashMap<MemoryState, usize>,
    cue_count: u16,
}

impl World {
    pub fn new(spec: &WorldSpec) -> Result<World> {
        spec.validate()?;
        let model = match spec.kind {
            WorldKind::KeyCorridor { cells, panels } => Model::KeyCorridor(KeyCorridor {
                cells: cells as u8,
                panels: panels as u8,
                failure_terminal: spec.failure_terminal,
            }),
            WorldKind::ShopSim { items, attributes } => Model::ShopSim(ShopSim {
                items: items as u8,
                attributes: attributes as u8,
                failure_terminal: spec.failure_terminal,
            }),
        };
        let dynamics = model.dynamics();
        if dynamics.max_memory() > spec.memory_cap {
            return Err(Error::InvalidSpec(format!(
                "episodes can reveal {} facts but the memory cap is {}",
                dynamics.max_memory(),
                spec.memory_cap
            )));
        }
        let goals: Vec<Goal> = dynamics
            .goals()
            .into_iter()
            .enumerate()
            .map(|(i, descriptor)| Goal { id: GoalId(i as u16), descriptor })
            .collect();
        let priors: Vec<(GoalId, Vec<Hidden>)> =
            goals.iter().map(|g| (g.id, dynamics.hidden_prior(g.id))).collect();

        // Breadth-first enumeration over every goal and hidden placement.
        let mut seen: BTreeSet<Encoding> = BTreeSet::new();
        let mut queue = VecDeque::from([dynamics.initial()]);
        seen.insert(dynamics.initial());
        while let Some(enc) = queue.pop_front() {
            for action in dynamics.actions(&enc) {
                for (goal, prior) in &priors {
                    for &h in prior.iter().filter(|&&h| dynamics.consistent(h, &enc)) {
                        let next = dynamics.apply(&enc, action, h, *goal).next;
                        if seen.insert(next) {
                            queue.push_back(next);
                        }
                    }
                }
            }
        }
        let states: Vec<EnvState> = seen
            .into_iter()
            .enumerate()
            .map(|(id, encoding)| EnvState { id: id as u32, encoding })
            .collect();
        let index = states.iter().map(|s| (s.encoding, s.id)).collect();
        let legal = states.iter().map(|s| dynamics.actions(&s.encoding)).collect();
        let obs_facts: Vec<Fact> = states
            .iter()
            .filter_map(|s| dynamics.observation(&s.encoding).map(|value| Fact { source: s.id, value }))
            .collect();
        let mut fact_slot: HashMap<Fact, u32> =
            obs_facts.iter().enumerate().map(|(i, f)| (*f, i as u32)).collect();
        for s in &states {
            fact_slot.insert(Fact::trace(s), (obs_facts.len() + s.id as usize) as u32);
        }

        let mut world = World {
            spec: spec.clone(),
            model,
            goals,
            states,
            index,
            legal,
            obs_facts,
            fact_slot,
            memories: Vec::new(),
            memory_slot: HashMap::new(),
            cue_count: 0,
        };
        world.cue_count = world.model.dynamics().cue_targets() + 1;
        world.memories = world.enumerate_consistent_memories(&priors);
        world.memory_slot = world.memories.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        world.check_index_capacity()?;
        Ok(world)
    }

    fn dynamics(&self) -> &dyn Dynamics {
        self.model.dynamics()
    }

    fn enumerate_consistent_memories(&self, priors: &[(GoalId, Vec<Hidden>)]) -> Vec<MemoryState> {
        let cap = self.spec.memory_cap;
        let mut out: BTreeSet<MemoryState> = BTreeSet::new();
        for (_, prior) in priors {
            for &h in prior {
                let facts: Vec<Fact> =
                    self.obs_facts.iter().copied().filter(|f| self.fact_consistent(h, f)).collect();
                for mask in 0u64..1 << facts.len() {
                    if mask.count_ones() as usize > cap {
                        continue;
                    }
                    out.insert(MemoryState::from_facts(
                        facts.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, f)| *f),
                    ));
                }
            }
        }
        out.into_iter().collect()
    }

    fn check_index_capacity(&self) -> Result<()> {
        let bits = self.fact_slots() as u32;
        let radix = (self.goals.len() as u128 + 1)
            * self.states.len() as u128
            * self.cue_count as u128
            * self.cue_count as u128
            * 2;
        if bits >= 100 || radix << bits >= 1u128 << 64 {
            return Err(Error::InvalidSpec(format!(
                "augmented state space of {} does not fit a 64-bit table index",
                self.spec.name()
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn goals(&self) -> &[Goal] {
        &self.goals
    }

    /// Goal id reserved for the rollback directive.
    pub fn rollback_goal(&self) -> GoalId {
        GoalId(self.goals.len() as u16)
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn state(&self, id: u32) -> Option<EnvState> {
        self.states.get(id as usize).copied()
    }

    pub fn state_of(&self, encoding: &Encoding) -> Option<EnvState> {
        self.index.get(encoding).and_then(|&id| self.state(id))
    }

    pub fn initial_state(&self) -> EnvState {
        self.state_of(&self.dynamics().initial()).expect("initial state is enumerated")
    }

    pub fn is_terminal(&self, s: &EnvState) -> bool {
        self.dynamics().is_terminal(&s.encoding)
    }

    pub fn is_success(&self, s: &EnvState) -> bool {
        self.dynamics().is_success(&s.encoding)
    }

    /// Legal actions of `s` in canonical order; empty on terminal states.
    pub fn legal_actions(&self, s: &EnvState) -> &[EnvAction] {
        &self.legal[s.id as usize]
    }

    /// Number of cue codes (`None` plus one per probe target).
    pub fn cue_count(&self) -> u16 {
        self.cue_count
    }

    pub fn cues(&self) -> impl Iterator<Item = ExplorationCue> {
        (0..self.cue_count).map(ExplorationCue::from_code)
    }

    /// Fact revealed by being in state `s`.
    pub fn observation_fact(&self, s: &EnvState) -> Option<Fact> {
        self.dynamics().observation(&s.encoding).map(|value| Fact { source: s.id, value })
    }

    pub fn observation_facts(&self) -> &[Fact] {
        &self.obs_facts
    }

    /// Memory states consistent with at least one hidden placement, canonical order.
    pub fn consistent_memories(&self) -> &[MemoryState] {
        &self.memories
    }

    /// Position of `memory` in [`World::consistent_memories`].
    pub fn memory_index(&self, memory: &MemoryState) -> Option<usize> {
        self.memory_slot.get(memory).copied()
    }

    pub fn memory_cap(&self) -> usize {
        self.spec.memory_cap
    }

    /// Pure transition function with legality check.
    pub fn transition(&self, s: &EnvState, action: EnvAction, hidden: Hidden, goal: GoalId) -> Result<StepResult> {
        if !self.legal_actions(s).contains(&action) {
            return Err(Error::IllegalAction { state: s.id, action: action.to_string() });
        }
        let out = self.dynamics().apply(&s.encoding, action, hidden, goal);
        let next = self.state_of(&out.next).expect("successor is enumerated");
        Ok(StepResult {
            next,
            observation: self.observation_fact(&next),
            terminal: out.terminal,
            success: out.success,
        })
    }

    /// Uniform prior support over hidden placements for `goal`.
    pub fn hidden_prior(&self, goal: GoalId) -> Vec<Hidden> {
        self.dynamics().hidden_prior(goal)
    }

    fn fact_consistent(&self, hidden: Hidden, fact: &Fact) -> bool {
        if fact.value == TRACE_VALUE {
            return true;
        }
        self.state(fact.source)
            .is_some_and(|s| self.dynamics().consistent(hidden, &s.encoding) && self.observation_fact(&s) == Some(*fact))
    }

    pub fn consistent(&self, hidden: Hidden, s: &EnvState, memory: &MemoryState) -> bool {
        self.dynamics().consistent(hidden, &s.encoding)
            && memory.facts().iter().all(|f| self.fact_consistent(hidden, f))
    }

    /// Support of the posterior over hidden facts given the visible state
    /// and memory (uniform weights).
    pub fn posterior(&self, goal: GoalId, s: &EnvState, memory: &MemoryState) -> Vec<Hidden> {
        self.hidden_prior(goal).into_iter().filter(|&h| self.consistent(h, s, memory)).collect()
    }

    /// An action that takes `s_now` back to `s_prev` in one step under every
    /// hidden placement consistent with both states, if any. Symmetric moves
    /// are preferred over `step_back`.
    pub fn inverse_action(&self, s_prev: &EnvState, s_now: &EnvState) -> Option<EnvAction> {
        if s_prev == s_now || self.is_terminal(s_now) {
            return None;
        }
        let hiddens: Vec<(GoalId, Hidden)> = self
            .goals
            .iter()
            .flat_map(|g| self.hidden_prior(g.id).into_iter().map(move |h| (g.id, h)))
            .filter(|(_, h)| {
                self.dynamics().consistent(*h, &s_now.encoding) && self.dynamics().consistent(*h, &s_prev.encoding)
            })
            .collect();
        let mut candidates: Vec<EnvAction> = self.legal_actions(s_now).to_vec();
        candidates.sort_by_key(|a| u8::from(*a == EnvAction::StepBack));
        candidates.into_iter().find(|&a| {
            hiddens.iter().all(|&(g, h)| {
                self.transition(s_now, a, h, g).map(|r| r.next == *s_prev).unwrap_or(false)
            }) && !hiddens.is_empty()
        })
    }

    /// Every one-step pair `(s_prev → s_now)` whose inverse action is
    /// verified to restore `s_prev`, in canonical order.
    pub fn rollback_pairs(&self) -> Vec<RollbackExample> {
        let mut out = BTreeSet::new();
        for s in self.states.iter().filter(|s| !self.is_terminal(s)) {
            for &a in self.legal_actions(s) {
                for goal in &self.goals {
                    for h in self.posterior(goal.id, s, &MemoryState::empty()) {
                        let Ok(step) = self.transition(s, a, h, goal.id) else { continue };
                        if let Some(back) = self.inverse_action(s, &step.next) {
                            let restored = self.transition(&step.next, back, h, goal.id);
                            if restored.map(|r| r.next == *s).unwrap_or(false) {
                                out.insert(RollbackExample { s_now: step.next, s_prev: *s, action: back });
                            }
                        }
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    /// Conditioning context of the rollback directive for `s_now → s_prev`.
    pub fn rollback_context(&self, s_now: &EnvState, s_prev: &EnvState) -> AugmentedState {
        AugmentedState {
            goal: self.rollback_goal(),
            env: *s_now,
            cue: ExplorationCue::None,
            memory: MemoryState::from_facts([Fact::trace(s_prev)]),
        }
    }

    fn fact_slots(&self) -> usize {
        self.obs_facts.len() + self.states.len()
    }

    /// Dense mixed-radix index of an augmented state:
    /// `((goal * S + state) * C + cue) * 2^F + memory bits`.
    pub fn encode(&self, s: &AugmentedState) -> Result<u64> {
        let bad = |what: String| Error::Encoding(what);
        if s.goal.0 as usize > self.goals.len() {
            return Err(bad(format!("goal {} out of range", s.goal.0)));
        }
        if self.state(s.env.id) != Some(s.env) {
            return Err(bad(format!("state {} is not part of this world", s.env.id)));
        }
        if s.cue.code() >= self.cue_count {
            return Err(bad(format!("cue code {} out of range", s.cue.code())));
        }
        if s.memory.len() > self.spec.memory_cap {
            return Err(bad(format!("memory of {} facts exceeds the cap", s.memory.len())));
        }
        let mut bits = 0u64;
        for f in s.memory.facts() {
            let slot = self.fact_slot.get(f).ok_or_else(|| bad(format!("unknown fact {f:?}")))?;
            bits |= 1 << slot;
        }
        let head = (s.goal.0 as u64 * self.states.len() as u64 + s.env.id as u64) * self.cue_count as u64
            + s.cue.code() as u64;
        Ok((head << self.fact_slots()) | bits)
    }

    /// Inverse of [`World::encode`].
    pub fn decode(&self, index: u64) -> Result<AugmentedState> {
        let slots = self.fact_slots();
        let bits = index & ((1u64 << slots) - 1);
        let mut head = index >> slots;
        let cue = ExplorationCue::from_code((head % self.cue_count as u64) as u16);
        head /= self.cue_count as u64;
        let env = self
            .state((head % self.states.len() as u64) as u32)
            .ok_or_else(|| Error::Encoding("state".into()))?;
        let goal = head / self.states.len() as u64;
        if goal as usize > self.goals.len() {
            return Err(Error::Encoding(format!("goal {goal} out of range")));
        }
        let facts = (0..slots).filter(|i| bits >> i & 1 == 1).map(|i| {
            if i < self.obs_facts.len() {
                self.obs_facts[i]
            } else {
                Fact::trace(&self.states[i - self.obs_facts.len()])
            }
        });
        Ok(AugmentedState { goal: GoalId(goal as u16), env, cue, memory: MemoryState::from_facts(facts) })
    }
}

/// A running episode. Single-owner and mutable; hidden facts never change.
#[derive(Debug, Clone)]
pub struct WorldInstance<'w> {
    world: &'w World,
    goal: GoalId,
    hidden: Hidden,
    current: EnvState,
    steps_used: usize,
    finished: bool,
}

impl<'w> WorldInstance<'w> {
    /// Starts an episode; hidden facts are a deterministic function of the
    /// spec salt, the goal and `episode_seed`.
    pub fn reset(world: &'w World, goal: GoalId, episode_seed: u64) -> Self {
        let mut rng = rng::stream(&[world.spec.seed, rng::domain::EPISODE, episode_seed]);
        let hidden = world.dynamics().sample_hidden(goal, &mut rng);
        Self::at(world, goal, hidden, world.initial_state(), 0)
    }

    /// Places an episode at an arbitrary state with known hidden facts.
    pub fn at(world: &'w World, goal: GoalId, hidden: Hidden, current: EnvState, steps_used: usize) -> Self {
        let finished = world.is_terminal(&current) || steps_used >= world.horizon();
        WorldInstance { world, goal, hidden, current, steps_used, finished }
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn goal(&self) -> GoalId {
        self.goal
    }

    pub fn hidden(&self) -> Hidden {
        self.hidden
    }

    pub fn current(&self) -> EnvState {
        self.current
    }

    pub fn steps_used(&self) -> usize {
        self.steps_used
    }

    /// True once a terminal state is reached or the horizon is exhausted.
    pub fn is_done(&self) -> bool {
        self.finished
    }

    pub fn step(&mut self, action: EnvAction) -> Result<StepResult> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let result = self.world.transition(&self.current, action, self.hidden, self.goal)?;
        self.current = result.next;
        self.steps_used += 1;
        self.finished = result.terminal || self.steps_used >= self.world.horizon();
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn kc(n: usize, k: usize, t: usize) -> World {
        World::new(&WorldSpec::key_corridor(n, k, t)).unwrap()
    }

    fn enc(cell: u8, view: u8, content: u8, key: u8, door: u8) -> Encoding {
        [cell, view, content, key, door, 0]
    }

    #[test]
    fn spec_validation() {
        assert!(World::new(&WorldSpec::key_corridor(1, 2, 10)).is_err());
        assert!(World::new(&WorldSpec::key_corridor(3, 0, 10)).is_err());
        assert!(World::new(&WorldSpec::key_corridor(3, 2, 5)).is_err());
        assert!(World::new(&WorldSpec::shop_sim(1, 2, 8)).is_err());
        assert!(World::new(&WorldSpec::shop_sim(3, 3, 8)).is_err(), "9 facts exceed the cap of 8");
        assert!(World::new(&WorldSpec::shop_sim(2, 2, 8)).is_ok());
        assert!(WorldSpec::by_name("maze", [2, 2], 8).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = WorldSpec::key_corridor(3, 2, 10);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"name\":\"key-corridor\""));
        let back: WorldSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let minimal: WorldSpec =
            serde_json::from_str(r#"{"name":"shop-sim","items":2,"attributes":1,"horizon":6}"#).unwrap();
        assert_eq!(minimal, WorldSpec::shop_sim(2, 1, 6));
    }

    #[test]
    fn reset_is_deterministic() {
        let w = kc(3, 2, 10);
        let a = WorldInstance::reset(&w, GoalId(0), 7);
        let b = WorldInstance::reset(&w, GoalId(0), 7);
        assert_eq!(a.hidden(), b.hidden());
        assert_eq!(a.current(), w.initial_state());
    }

    #[test]
    fn key_placement_is_uniform() {
        let w = kc(3, 2, 10);
        let n = 1000;
        let ones = (0..n).filter(|&s| WorldInstance::reset(&w, GoalId(0), s).hidden().0 == 1).count();
        // Binomial(1000, 0.5): sigma = 15.8
        assert!((ones as f64 - 500.0).abs() < 3.0 * 15.82, "ones = {ones}");
    }

    #[test]
    fn shop_starts_on_catalog() {
        let w = World::new(&WorldSpec::shop_sim(2, 1, 6)).unwrap();
        let inst = WorldInstance::reset(&w, GoalId(1), 3);
        assert_eq!(inst.current().encoding, [0; 6]);
        assert_eq!(w.observation_fact(&inst.current()), None);
    }

    #[test]
    fn inspect_reveals_key() {
        let w = kc(3, 2, 10);
        let mut inst = WorldInstance::reset(&w, GoalId(0), 7);
        let p = inst.hidden().0 as u16;
        let r = inst.step(EnvAction::Inspect(p)).unwrap();
        assert!(!r.terminal);
        assert_eq!(r.observation, Some(Fact { source: r.next.id, value: 1 }));
    }

    #[test]
    fn failed_open_is_non_terminal_by_default() {
        let w = kc(2, 1, 4);
        let mut inst = WorldInstance::reset(&w, GoalId(0), 0);
        inst.step(EnvAction::MoveRight).unwrap();
        let r = inst.step(EnvAction::OpenDoor).unwrap();
        assert!(!r.terminal && !r.success);
        assert_eq!(inst.steps_used(), 2);

        let mut spec = WorldSpec::key_corridor(2, 1, 4);
        spec.failure_terminal = true;
        let w = World::new(&spec).unwrap();
        let mut inst = WorldInstance::reset(&w, GoalId(0), 0);
        inst.step(EnvAction::MoveRight).unwrap();
        let r = inst.step(EnvAction::OpenDoor).unwrap();
        assert!(r.terminal && !r.success);
    }

    #[test]
    fn illegal_action_is_an_error() {
        let w = kc(3, 2, 10);
        let mut inst = WorldInstance::reset(&w, GoalId(0), 1);
        assert!(matches!(inst.step(EnvAction::OpenDoor), Err(Error::IllegalAction { .. })));
        assert!(matches!(inst.step(EnvAction::Buy(0)), Err(Error::IllegalAction { .. })));
        assert_eq!(inst.steps_used(), 0);
    }

    /// Shortest successful episode length by breadth-first search over
    /// (state, knowledge) where the agent must inspect before it can know.
    fn optimal_informed_steps(w: &World, hidden: Hidden) -> usize {
        let mut best = usize::MAX;
        let mut queue = VecDeque::from([(w.initial_state(), false, 0usize)]);
        let mut seen = BTreeSet::new();
        while let Some((s, knows, d)) = queue.pop_front() {
            if !seen.insert((s.id, knows)) {
                continue;
            }
            for &a in w.legal_actions(&s) {
                if matches!(a, EnvAction::Pick(_)) && !knows {
                    continue;
                }
                let r = w.transition(&s, a, hidden, GoalId(0)).unwrap();
                if r.success {
                    best = best.min(d + 1);
                }
                if !r.terminal {
                    let informed = knows || r.observation.is_some();
                    queue.push_back((r.next, informed, d + 1));
                }
            }
        }
        best
    }

    #[test]
    fn scripted_policy_succeeds_within_optimal_steps() {
        let w = kc(3, 2, 8);
        for seed in 0..20 {
            let mut inst = WorldInstance::reset(&w, GoalId(0), seed);
            let optimal = optimal_informed_steps(&w, inst.hidden());
            assert!(optimal <= 6);
            // inspect panel 0, step back, pick the right panel, walk, open.
            let seen = inst.step(EnvAction::Inspect(0)).unwrap().observation.unwrap();
            inst.step(EnvAction::StepBack).unwrap();
            let panel = if seen.value == 1 { 0 } else { 1 };
            inst.step(EnvAction::Pick(panel)).unwrap();
            inst.step(EnvAction::MoveRight).unwrap();
            inst.step(EnvAction::MoveRight).unwrap();
            let last = inst.step(EnvAction::OpenDoor).unwrap();
            assert!(last.success && last.terminal);
            assert_eq!(inst.steps_used(), optimal);
        }
    }

    #[test]
    fn legal_actions_and_step_back() {
        let w = kc(3, 2, 10);
        let s0 = w.initial_state();
        assert!(!w.legal_actions(&s0).contains(&EnvAction::StepBack));
        let s1 = w.transition(&s0, EnvAction::MoveRight, Hidden(0), GoalId(0)).unwrap().next;
        assert!(w.legal_actions(&s1).contains(&EnvAction::StepBack));
        let view = w.transition(&s0, EnvAction::Inspect(1), Hidden(0), GoalId(0)).unwrap().next;
        assert_eq!(w.legal_actions(&view), &[EnvAction::StepBack]);
    }

    #[test]
    fn legal_actions_fuzz() {
        for w in [kc(3, 2, 10), World::new(&WorldSpec::shop_sim(2, 2, 8)).unwrap()] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            for _ in 0..10_000 {
                let s = w.states()[rng.gen_range(0..w.states().len())];
                let goal = GoalId(rng.gen_range(0..w.goals().len()) as u16);
                let post = w.posterior(goal, &s, &MemoryState::empty());
                if w.is_terminal(&s) || post.is_empty() {
                    continue;
                }
                let h = post[rng.gen_range(0..post.len())];
                let legal = w.legal_actions(&s);
                assert!(!legal.is_empty());
                let a = legal[rng.gen_range(0..legal.len())];
                w.transition(&s, a, h, goal).unwrap();
            }
        }
    }

    #[test]
    fn inverse_action_examples() {
        let w = kc(3, 2, 10);
        let s0 = w.initial_state();
        let s1 = w.transition(&s0, EnvAction::MoveRight, Hidden(0), GoalId(0)).unwrap().next;
        assert_eq!(w.inverse_action(&s0, &s1), Some(EnvAction::MoveLeft));
        let keyed = w.transition(&s0, EnvAction::Pick(0), Hidden(0), GoalId(0)).unwrap().next;
        assert_eq!(w.inverse_action(&s0, &keyed), None);
        let view = w.transition(&s0, EnvAction::Inspect(1), Hidden(0), GoalId(0)).unwrap().next;
        assert_eq!(w.inverse_action(&s0, &view), Some(EnvAction::StepBack));
        assert_eq!(w.inverse_action(&view, &s0), Some(EnvAction::Inspect(1)));
    }

    #[test]
    fn rollback_soundness_over_all_pairs() {
        for w in [kc(3, 2, 10), World::new(&WorldSpec::shop_sim(2, 2, 8)).unwrap()] {
            let pairs = w.rollback_pairs();
            assert!(!pairs.is_empty());
            for ex in &pairs {
                for goal in w.goals() {
                    let hs = w.posterior(goal.id, &ex.s_now, &MemoryState::empty());
                    for h in hs.into_iter().filter(|&h| w.consistent(h, &ex.s_prev, &MemoryState::empty())) {
                        let r = w.transition(&ex.s_now, ex.action, h, goal.id).unwrap();
                        assert_eq!(r.next, ex.s_prev);
                    }
                }
            }
        }
        // Independent count of distinct reversible one-step pairs.
        let w = kc(3, 2, 10);
        let mut expected = BTreeSet::new();
        for s in w.states().iter().filter(|s| !w.is_terminal(s)) {
            for &a in w.legal_actions(s) {
                for h in w.posterior(GoalId(0), s, &MemoryState::empty()) {
                    let r = w.transition(s, a, h, GoalId(0)).unwrap();
                    let back = w.legal_actions(&r.next).iter().any(|&b| {
                        w.transition(&r.next, b, h, GoalId(0)).is_ok_and(|x| x.next == *s)
                    });
                    if r.next != *s && back {
                        expected.insert((s.id, r.next.id));
                    }
                }
            }
        }
        assert_eq!(w.rollback_pairs().len(), expected.len());
        assert_eq!(expected.len(), 16);
    }

    #[test]
    fn hidden_never_changes() {
        let w = World::new(&WorldSpec::shop_sim(2, 2, 8)).unwrap();
        let mut inst = WorldInstance::reset(&w, GoalId(3), 11);
        let h = inst.hidden();
        for a in [EnvAction::Query(0), EnvAction::StepBack, EnvAction::Buy(0), EnvAction::Buy(1)] {
            if inst.is_done() {
                break;
            }
            let _ = inst.step(a);
            assert_eq!(inst.hidden(), h);
        }
    }

    #[test]
    fn information_is_necessary_without_inspection() {
        // Every deterministic memory-free policy that never inspects maps each
        // state to one action; enumerate all of them on key-corridor(3,2).
        let w = kc(3, 2, 10);
        let decision: Vec<EnvState> = w
            .states()
            .iter()
            .copied()
            .filter(|s| !w.is_terminal(s) && w.observation_fact(s).is_none())
            .collect();
        let choices: Vec<Vec<EnvAction>> = decision
            .iter()
            .map(|s| w.legal_actions(s).iter().copied().filter(|a| !matches!(a, EnvAction::Inspect(_))).collect())
            .collect();
        let total: usize = choices.iter().map(Vec::len).product();
        let mut best: f64 = 0.0;
        for mut code in 0..total {
            let table: HashMap<u32, EnvAction> = decision
                .iter()
                .zip(&choices)
                .map(|(s, c)| {
                    let a = c[code % c.len()];
                    code /= c.len();
                    (s.id, a)
                })
                .collect();
            let mut wins = 0;
            for h in w.hidden_prior(GoalId(0)) {
                let mut inst = WorldInstance::at(&w, GoalId(0), h, w.initial_state(), 0);
                while !inst.is_done() {
                    let r = inst.step(table[&inst.current().id]).unwrap();
                    if r.success {
                        wins += 1;
                    }
                }
            }
            best = best.max(wins as f64 / 2.0);
        }
        assert!(best < 1.0, "a memory-free policy solved every placement");
        assert_eq!(best, 0.5);
    }

    #[test]
    fn augmented_encoding_roundtrips_exhaustively() {
        let w = kc(3, 2, 10);
        let goals = [GoalId(0), w.rollback_goal()];
        for goal in goals {
            for s in w.states() {
                for cue in w.cues() {
                    for m in w.consistent_memories() {
                        let st = AugmentedState { goal, env: *s, cue, memory: m.clone() };
                        let idx = w.encode(&st).unwrap();
                        assert_eq!(w.decode(idx).unwrap(), st);
                    }
                }
                let prev = w.initial_state();
                let rb = w.rollback_context(s, &prev);
                assert_eq!(w.decode(w.encode(&rb).unwrap()).unwrap(), rb);
            }
        }
        assert_eq!(w.consistent_memories().len(), 7);
        let shop = World::new(&WorldSpec::shop_sim(2, 2, 8)).unwrap();
        assert_eq!(shop.consistent_memories().len(), 81);
    }

    #[test]
    fn state_ids_are_a_bijection() {
        let w = kc(3, 2, 10);
        for (i, s) in w.states().iter().enumerate() {
            assert_eq!(s.id as usize, i);
            assert_eq!(w.state_of(&s.encoding), Some(*s));
        }
        let mut encs: Vec<_> = w.states().iter().map(|s| s.encoding).collect();
        encs.dedup();
        assert_eq!(encs.len(), w.states().len());
    }

    #[test]
    fn enc_helper_states_exist() {
        let w = kc(3, 2, 10);
        assert!(w.state_of(&enc(2, 0, 0, 1, 1)).is_some_and(|s| w.is_success(&s)));
        assert!(w.state_of(&enc(0, 0, 0, 2, 0)).is_some_and(|s| w.is_terminal(&s)));
        assert!(w.state_of(&enc(0, 2, 1, 0, 0)).is_some());
    }
}
