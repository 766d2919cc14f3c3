//! Exact success probabilities by exhaustive enumeration of the trajectory
//! tree, averaging over policy randomness and the hidden-fact posterior.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mdp::{AugmentedAction, AugmentedState, EnvAction, ExplorationCue, MemoryState};

use super::{Hidden, World, DEFAULT_NODE_BUDGET};

/// A stochastic policy over augmented actions, factorised as
/// cue → memory update → environment action.
pub trait PolicyEvaluator {
    fn cue_distribution(&self, world: &World, s: &AugmentedState) -> Vec<(ExplorationCue, f64)>;

    fn memory_distribution(
        &self,
        world: &World,
        s: &AugmentedState,
        cue: ExplorationCue,
    ) -> Vec<(MemoryState, f64)>;

    fn action_distribution(
        &self,
        world: &World,
        s: &AugmentedState,
        cue: ExplorationCue,
        memory: &MemoryState,
    ) -> Vec<(EnvAction, f64)>;

    /// Joint distribution over complete augmented actions.
    fn distribution(&self, world: &World, s: &AugmentedState) -> Vec<(AugmentedAction, f64)> {
        let mut out = Vec::new();
        for (cue, pc) in self.cue_distribution(world, s) {
            for (memory, pm) in self.memory_distribution(world, s, cue) {
                for (act, pa) in self.action_distribution(world, s, cue, &memory) {
                    out.push((AugmentedAction { cue, memory: memory.clone(), act }, pc * pm * pa));
                }
            }
        }
        out
    }
}

/// Memoised exact evaluator.
///
/// Success on the `k`-th step from the start (0-based) contributes `γ^k`;
/// with `γ = 1` the value is the plain success probability.
pub struct ExactEvaluator<'a, P: PolicyEvaluator + ?Sized> {
    world: &'a World,
    policy: &'a P,
    gamma: f64,
    budget: u64,
    nodes: u64,
    memo: HashMap<(Hidden, u64, usize), f64>,
}

impl<'a, P: PolicyEvaluator + ?Sized> ExactEvaluator<'a, P> {
    pub fn new(world: &'a World, policy: &'a P) -> Self {
        ExactEvaluator { world, policy, gamma: 1.0, budget: DEFAULT_NODE_BUDGET, nodes: 0, memo: HashMap::new() }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    /// Nodes expanded so far.
    pub fn nodes(&self) -> u64 {
        self.nodes
    }

    fn hiddens(&self, s: &AugmentedState) -> Vec<Hidden> {
        let goal = if s.goal.0 as usize >= self.world.goals().len() { crate::mdp::GoalId(0) } else { s.goal };
        self.world.posterior(goal, &s.env, &s.memory)
    }

    /// Success probability from `s` with `steps_left` steps remaining,
    /// averaged uniformly over hidden placements consistent with `s`.
    /// Returns 0 when no placement is consistent.
    pub fn success(&mut self, s: &AugmentedState, steps_left: usize) -> Result<f64> {
        let hs = self.hiddens(s);
        if hs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &h in &hs {
            total += self.value(h, s, steps_left)?;
        }
        Ok(total / hs.len() as f64)
    }

    /// Success probability when the first augmented step is forced to emit
    /// `(cue, memory)` and only the environment action is sampled.
    pub fn success_given_emission(
        &mut self,
        s: &AugmentedState,
        cue: ExplorationCue,
        memory: &MemoryState,
        steps_left: usize,
    ) -> Result<f64> {
        let hs = self.hiddens(s);
        if hs.is_empty() || steps_left == 0 || self.world.is_terminal(&s.env) {
            return Ok(0.0);
        }
        let actions = self.policy.action_distribution(self.world, s, cue, memory);
        let mut total = 0.0;
        for &h in &hs {
            for &(act, p) in &actions {
                if p > 0.0 {
                    let a = AugmentedAction { cue, memory: memory.clone(), act };
                    total += p * self.continue_after(h, s, &a, steps_left)?;
                }
            }
        }
        Ok(total / hs.len() as f64)
    }

    fn continue_after(&mut self, h: Hidden, s: &AugmentedState, a: &AugmentedAction, steps_left: usize) -> Result<f64> {
        let goal = if s.goal.0 as usize >= self.world.goals().len() { crate::mdp::GoalId(0) } else { s.goal };
        let step = self.world.transition(&s.env, a.act, h, goal)?;
        if step.success {
            return Ok(1.0);
        }
        if step.terminal || steps_left <= 1 {
            return Ok(0.0);
        }
        let next = AugmentedState { goal: s.goal, env: step.next, cue: a.cue, memory: a.memory.clone() };
        Ok(self.gamma * self.value(h, &next, steps_left - 1)?)
    }

    fn value(&mut self, h: Hidden, s: &AugmentedState, steps_left: usize) -> Result<f64> {
        if steps_left == 0 || self.world.is_terminal(&s.env) {
            return Ok(0.0);
        }
        let key = (h, self.world.encode(s)?, steps_left);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(Error::NodeBudgetExceeded(self.budget));
        }
        let mut v = 0.0;
        for (a, p) in self.policy.distribution(self.world, s) {
            if p > 0.0 {
                v += p * self.continue_after(h, s, &a, steps_left)?;
            }
        }
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// Exact probability that a trajectory from `from`, with the full horizon
/// remaining, ends in success.
pub fn exact_success_probability<P: PolicyEvaluator + ?Sized>(
    world: &World,
    policy: &P,
    from: &AugmentedState,
) -> Result<f64> {
    ExactEvaluator::new(world, policy).success(from, world.horizon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Fact, GoalId};
    use crate::worlds::{WorldInstance, WorldSpec};

    /// Uniform over cues, always keeps memory, uniform over legal actions.
    struct Uniform;

    impl PolicyEvaluator for Uniform {
        fn cue_distribution(&self, w: &World, _: &AugmentedState) -> Vec<(ExplorationCue, f64)> {
            let c = w.cue_count() as f64;
            w.cues().map(|e| (e, 1.0 / c)).collect()
        }
        fn memory_distribution(&self, _: &World, s: &AugmentedState, _: ExplorationCue) -> Vec<(MemoryState, f64)> {
            vec![(s.memory.clone(), 1.0)]
        }
        fn action_distribution(
            &self,
            w: &World,
            s: &AugmentedState,
            _: ExplorationCue,
            _: &MemoryState,
        ) -> Vec<(EnvAction, f64)> {
            let legal = w.legal_actions(&s.env);
            legal.iter().map(|&a| (a, 1.0 / legal.len() as f64)).collect()
        }
    }

    /// Picks the panel recorded in memory, then walks to the door.
    struct Informed;

    impl PolicyEvaluator for Informed {
        fn cue_distribution(&self, _: &World, _: &AugmentedState) -> Vec<(ExplorationCue, f64)> {
            vec![(ExplorationCue::None, 1.0)]
        }
        fn memory_distribution(&self, _: &World, s: &AugmentedState, _: ExplorationCue) -> Vec<(MemoryState, f64)> {
            vec![(s.memory.clone(), 1.0)]
        }
        fn action_distribution(
            &self,
            w: &World,
            s: &AugmentedState,
            _: ExplorationCue,
            m: &MemoryState,
        ) -> Vec<(EnvAction, f64)> {
            let legal = w.legal_actions(&s.env);
            let key_panel = m.facts().iter().find_map(|f| {
                let src = w.state(f.source)?;
                (f.value == 1).then(|| src.encoding[1] as u16 - 1)
            });
            let choice = key_panel
                .map(EnvAction::Pick)
                .into_iter()
                .chain([EnvAction::OpenDoor, EnvAction::MoveRight])
                .find(|a| legal.contains(a))
                .unwrap_or(legal[0]);
            vec![(choice, 1.0)]
        }
    }

    #[test]
    fn informed_policy_with_known_key_succeeds_surely() {
        let w = World::new(&WorldSpec::key_corridor(3, 2, 8)).unwrap();
        let s0 = w.initial_state();
        let view = w.transition(&s0, EnvAction::Inspect(1), Hidden(1), GoalId(0)).unwrap();
        let fact: Fact = view.observation.unwrap();
        let start = AugmentedState {
            goal: GoalId(0),
            env: s0,
            cue: ExplorationCue::None,
            memory: MemoryState::from_facts([fact]),
        };
        assert_eq!(exact_success_probability(&w, &Informed, &start).unwrap(), 1.0);
    }

    /// key-corridor(2,1,T=2) under the uniform policy, by hand.
    /// Start (cell 0): {move_right, inspect_0, pick_0}, each 1/3.
    /// Success needs the key at the door within two steps, which is
    /// impossible (pick, move, open takes three), so the value is 0.
    /// With T=3: pick (1/3) → {move_right} (1) → {move_left, step_back, open} (1/3) = 1/9.
    #[test]
    fn uniform_policy_hand_enumeration() {
        let w = World::new(&WorldSpec::key_corridor(2, 1, 4)).unwrap();
        let start = AugmentedState::initial(GoalId(0), w.initial_state());
        let mut ev = ExactEvaluator::new(&w, &Uniform);
        assert_eq!(ev.success(&start, 2).unwrap(), 0.0);
        assert!((ev.success(&start, 3).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        // Every other four-step path either never picks or picks too late to open.
        assert!((ev.success(&start, 4).unwrap() - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn success_and_failure_partition_outcomes() {
        let w = World::new(&WorldSpec::key_corridor(2, 1, 5)).unwrap();
        let start = AugmentedState::initial(GoalId(0), w.initial_state());
        let p_success = ExactEvaluator::new(&w, &Uniform).success(&start, 5).unwrap();
        let p_failure = failure_probability(&w, &start, 5);
        assert!((p_success + p_failure - 1.0).abs() < 1e-12);
    }

    fn failure_probability(w: &World, s: &AugmentedState, left: usize) -> f64 {
        if left == 0 || w.is_terminal(&s.env) {
            return if w.is_success(&s.env) { 0.0 } else { 1.0 };
        }
        let legal = w.legal_actions(&s.env);
        legal
            .iter()
            .map(|&a| {
                let r = w.transition(&s.env, a, Hidden(0), GoalId(0)).unwrap();
                let next = AugmentedState { env: r.next, ..s.clone() };
                failure_probability(w, &next, left - 1) / legal.len() as f64
            })
            .sum()
    }

    #[test]
    fn exact_matches_monte_carlo() {
        use rand::Rng;
        let w = World::new(&WorldSpec::key_corridor(2, 1, 5)).unwrap();
        let start = AugmentedState::initial(GoalId(0), w.initial_state());
        let exact = exact_success_probability(&w, &Uniform, &start).unwrap();
        let mut rng = crate::rng::stream(&[42]);
        let n = 20_000;
        let mut wins = 0;
        for seed in 0..n {
            let mut inst = WorldInstance::reset(&w, GoalId(0), seed);
            while !inst.is_done() {
                let legal = w.legal_actions(&inst.current());
                let a = legal[rng.gen_range(0..legal.len())];
                if inst.step(a).unwrap().success {
                    wins += 1;
                }
            }
        }
        let p = wins as f64 / n as f64;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((p - exact).abs() < 4.0 * sigma, "mc {p} exact {exact}");
    }

    #[test]
    fn node_budget_is_enforced() {
        let w = World::new(&WorldSpec::key_corridor(3, 2, 10)).unwrap();
        let start = AugmentedState::initial(GoalId(0), w.initial_state());
        let err = ExactEvaluator::new(&w, &Uniform).with_budget(10).success(&start, 10);
        assert_eq!(err, Err(Error::NodeBudgetExceeded(10)));
    }
}
