//! Factorised tabular softmax policy.
//!
//! An augmented action is emitted as three tokens: an exploration cue, a
//! memory update and an environment action. Each token has its own logit
//! table keyed by the dense index of the conditioning context:
//!
//! - cue head: `s̃`
//! - memory head: `(s̃, cue)`, choosing between keeping the incoming memory
//!   and inserting the fact revealed by the current state
//! - action head: `(s̃, cue, memory choice)`, over the legal actions
//!
//! Rows are allocated lazily and start at zero, i.e. uniform.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{AugmentedAction, AugmentedState, EnvAction, EnvState, ExplorationCue, MemoryState};
use crate::worlds::{PolicyEvaluator, RollbackExample, World};

/// Default PPO-style clipping range.
pub const DEFAULT_CLIP_EPS: f64 = 0.2;
/// Default KL penalty against the reference policy.
pub const DEFAULT_KL_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Head {
    Cue,
    Memory,
    Action,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(p ‖ r)` for two categorical rows given as logits.
pub fn kl_logits(p_logits: &[f64], r_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lr = log_softmax(r_logits);
    lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Samples an index from a probability row.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Admissible memory updates for `s`: keep, then insert the fact revealed
/// by the current state when it is new and the cap allows.
pub fn memory_options(world: &World, s: &AugmentedState) -> Vec<MemoryState> {
    let mut out = vec![s.memory.clone()];
    if let Some(fact) = world.observation_fact(&s.env) {
        if !s.memory.contains(&fact) && s.memory.len() < world.memory_cap() {
            out.push(s.memory.with(fact));
        }
    }
    out
}

/// Table keys of the three rows visited when emitting from `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowKeys {
    pub cue: u64,
    pub memory: u64,
    pub action: u64,
}

/// Keys of the rows used when emitting `cue` and memory option `choice` from `s`.
pub fn row_keys(world: &World, s: &AugmentedState, cue: ExplorationCue, choice: usize) -> Result<RowKeys> {
    let idx = world.encode(s)?;
    let memory = idx * world.cue_count() as u64 + cue.code() as u64;
    Ok(RowKeys { cue: idx, memory, action: memory * 2 + choice as u64 })
}

/// Resolved token indices of an augmented action in its three rows.
#[derive(Debug, Clone)]
struct Tokens {
    keys: RowKeys,
    sizes: [usize; 3],
    picks: [usize; 3],
}

fn tokens(world: &World, s: &AugmentedState, a: &AugmentedAction) -> Result<Tokens> {
    let inadmissible = |what: &str| Error::Inadmissible(format!("{what} in state {}", s.env.id));
    let cues = world.cue_count() as usize;
    let cue = a.cue.code() as usize;
    if cue >= cues {
        return Err(inadmissible("cue out of range"));
    }
    let options = memory_options(world, s);
    let choice = options.iter().position(|m| *m == a.memory).ok_or_else(|| inadmissible("memory update"))?;
    let legal = world.legal_actions(&s.env);
    let act = legal.iter().position(|&x| x == a.act).ok_or_else(|| inadmissible("illegal action"))?;
    Ok(Tokens {
        keys: row_keys(world, s, a.cue, choice)?,
        sizes: [cues, options.len(), legal.len()],
        picks: [cue, choice, act],
    })
}

/// The three logit tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub cue: BTreeMap<u64, Vec<f64>>,
    pub memory: BTreeMap<u64, Vec<f64>>,
    pub action: BTreeMap<u64, Vec<f64>>,
}

/// A sampled augmented action with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub action: AugmentedAction,
    pub log_probs: [f64; 3],
}

impl PolicyParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&self, head: Head) -> &BTreeMap<u64, Vec<f64>> {
        match head {
            Head::Cue => &self.cue,
            Head::Memory => &self.memory,
            Head::Action => &self.action,
        }
    }

    pub fn table_mut(&mut self, head: Head) -> &mut BTreeMap<u64, Vec<f64>> {
        match head {
            Head::Cue => &mut self.cue,
            Head::Memory => &mut self.memory,
            Head::Action => &mut self.action,
        }
    }

    /// Logits of a row; an unvisited row is all zeros.
    pub fn logits(&self, head: Head, key: u64, len: usize) -> Vec<f64> {
        match self.table(head).get(&key) {
            Some(row) if row.len() == len => row.clone(),
            _ => vec![0.0; len],
        }
    }

    pub fn row_mut(&mut self, head: Head, key: u64, len: usize) -> &mut Vec<f64> {
        let row = self.table_mut(head).entry(key).or_insert_with(|| vec![0.0; len]);
        if row.len() != len {
            *row = vec![0.0; len];
        }
        row
    }

    pub fn probs(&self, head: Head, key: u64, len: usize) -> Vec<f64> {
        softmax(&self.logits(head, key, len))
    }

    /// Number of allocated rows over all heads.
    pub fn allocated_rows(&self) -> usize {
        self.cue.len() + self.memory.len() + self.action.len()
    }

    /// Samples cue, memory update and action autoregressively.
    pub fn sample(&self, world: &World, s: &AugmentedState, rng: &mut impl Rng) -> Result<Sampled> {
        let legal = world.legal_actions(&s.env);
        if legal.is_empty() {
            return Err(Error::Empty("legal actions"));
        }
        let cues = world.cue_count() as usize;
        let k0 = row_keys(world, s, ExplorationCue::None, 0)?;
        let lp_cue = log_softmax(&self.logits(Head::Cue, k0.cue, cues));
        let cue_i = sample_index(&lp_cue.iter().map(|l| l.exp()).collect::<Vec<_>>(), rng);
        let cue = ExplorationCue::from_code(cue_i as u16);

        let options = memory_options(world, s);
        let k1 = row_keys(world, s, cue, 0)?;
        let lp_mem = log_softmax(&self.logits(Head::Memory, k1.memory, options.len()));
        let choice = sample_index(&lp_mem.iter().map(|l| l.exp()).collect::<Vec<_>>(), rng);

        let k2 = row_keys(world, s, cue, choice)?;
        let lp_act = log_softmax(&self.logits(Head::Action, k2.action, legal.len()));
        let act_i = sample_index(&lp_act.iter().map(|l| l.exp()).collect::<Vec<_>>(), rng);

        Ok(Sampled {
            action: AugmentedAction { cue, memory: options[choice].clone(), act: legal[act_i] },
            log_probs: [lp_cue[cue_i], lp_mem[choice], lp_act[act_i]],
        })
    }

    /// Per-token log-probabilities of `a` in context `s`.
    pub fn log_probs(&self, world: &World, s: &AugmentedState, a: &AugmentedAction) -> Result<[f64; 3]> {
        let t = tokens(world, s, a)?;
        let rows = [
            self.logits(Head::Cue, t.keys.cue, t.sizes[0]),
            self.logits(Head::Memory, t.keys.memory, t.sizes[1]),
            self.logits(Head::Action, t.keys.action, t.sizes[2]),
        ];
        Ok([0, 1, 2].map(|k| log_softmax(&rows[k])[t.picks[k]]))
    }

    pub fn log_prob(&self, world: &World, s: &AugmentedState, a: &AugmentedAction) -> Result<f64> {
        Ok(self.log_probs(world, s, a)?.iter().sum())
    }

    /// Most likely action under the action head for a fixed cue and memory choice.
    pub fn greedy_action(
        &self,
        world: &World,
        s: &AugmentedState,
        cue: ExplorationCue,
        choice: usize,
    ) -> Result<EnvAction> {
        let legal = world.legal_actions(&s.env);
        if legal.is_empty() {
            return Err(Error::Empty("legal actions"));
        }
        let k = row_keys(world, s, cue, choice)?;
        let row = self.logits(Head::Action, k.action, legal.len());
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        Ok(legal[best])
    }

    /// The policy's rollback choice for returning from `s_now` to `s_prev`.
    pub fn greedy_rollback(&self, world: &World, s_now: &EnvState, s_prev: &EnvState) -> Result<EnvAction> {
        let ctx = world.rollback_context(s_now, s_prev);
        self.greedy_action(world, &ctx, ExplorationCue::None, 0)
    }

    /// Mean negative log-likelihood of the rollback dataset.
    pub fn rollback_loss(&self, world: &World, dataset: &[RollbackExample]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Empty("rollback dataset"));
        }
        let mut total = 0.0;
        for ex in dataset {
            let (key, legal, pick) = rollback_row(world, ex)?;
            total -= log_softmax(&self.logits(Head::Action, key, legal))[pick];
        }
        Ok(total / dataset.len() as f64)
    }

    /// One gradient step on the mean rollback NLL; returns the loss before the step.
    pub fn sft_rollback_update(&mut self, world: &World, dataset: &[RollbackExample], lr: f64) -> Result<f64> {
        let loss = self.rollback_loss(world, dataset)?;
        let n = dataset.len() as f64;
        let mut grads: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for ex in dataset {
            let (key, len, pick) = rollback_row(world, ex)?;
            let p = self.probs(Head::Action, key, len);
            let g = grads.entry(key).or_insert_with(|| vec![0.0; len]);
            for (i, pi) in p.iter().enumerate() {
                g[i] += (pi - f64::from(u8::from(i == pick))) / n;
            }
        }
        for (key, g) in grads {
            let row = self.row_mut(Head::Action, key, g.len());
            for (z, gi) in row.iter_mut().zip(&g) {
                *z -= lr * gi;
            }
        }
        Ok(loss)
    }

    /// Gradient ascent step `θ ← θ + lr·g`.
    pub fn apply(&mut self, grad: &Gradient, lr: f64) {
        for ((head, key), g) in &grad.rows {
            let row = self.row_mut(*head, *key, g.len());
            for (z, gi) in row.iter_mut().zip(g) {
                *z += lr * gi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        [Head::Cue, Head::Memory, Head::Action]
            .iter()
            .all(|&h| self.table(h).values().all(|r| r.iter().all(|z| z.is_finite())))
    }

    pub fn snapshot(&self, role: SnapshotRole) -> PolicySnapshot {
        PolicySnapshot { params: Arc::new(self.clone()), role }
    }
}

fn rollback_row(world: &World, ex: &RollbackExample) -> Result<(u64, usize, usize)> {
    let ctx = world.rollback_context(&ex.s_now, &ex.s_prev);
    let legal = world.legal_actions(&ex.s_now);
    let pick = legal.iter().position(|&a| a == ex.action).ok_or_else(|| Error::IllegalAction {
        state: ex.s_now.id,
        action: ex.action.to_string(),
    })?;
    Ok((row_keys(world, &ctx, ExplorationCue::None, 0)?.action, legal.len(), pick))
}

impl PolicyEvaluator for PolicyParams {
    fn cue_distribution(&self, world: &World, s: &AugmentedState) -> Vec<(ExplorationCue, f64)> {
        let Ok(k) = row_keys(world, s, ExplorationCue::None, 0) else { return Vec::new() };
        let p = self.probs(Head::Cue, k.cue, world.cue_count() as usize);
        world.cues().zip(p).collect()
    }

    fn memory_distribution(&self, world: &World, s: &AugmentedState, cue: ExplorationCue) -> Vec<(MemoryState, f64)> {
        let options = memory_options(world, s);
        let Ok(k) = row_keys(world, s, cue, 0) else { return Vec::new() };
        let p = self.probs(Head::Memory, k.memory, options.len());
        options.into_iter().zip(p).collect()
    }

    fn action_distribution(
        &self,
        world: &World,
        s: &AugmentedState,
        cue: ExplorationCue,
        memory: &MemoryState,
    ) -> Vec<(EnvAction, f64)> {
        let legal = world.legal_actions(&s.env);
        let Some(choice) = memory_options(world, s).iter().position(|m| m == memory) else {
            return Vec::new();
        };
        let Ok(k) = row_keys(world, s, cue, choice) else { return Vec::new() };
        legal.iter().copied().zip(self.probs(Head::Action, k.action, legal.len())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotRole {
    Old,
    Reference,
}

/// Immutable, cheaply cloneable frozen parameters.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    pub role: SnapshotRole,
}

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

/// `exp(log π_θ − log π_old)` for the cue, memory and action tokens.
pub fn token_importance_weights(
    params: &PolicyParams,
    old: &PolicyParams,
    world: &World,
    s: &AugmentedState,
    a: &AugmentedAction,
) -> Result<[f64; 3]> {
    let new = params.log_probs(world, s, a)?;
    let old = old.log_probs(world, s, a)?;
    if old.iter().any(|l| !l.is_finite()) {
        return Err(Error::ZeroOldProbability);
    }
    Ok([0, 1, 2].map(|k| (new[k] - old[k]).exp()))
}

/// One batch element of the clipped surrogate.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub s_tilde: AugmentedState,
    pub a_tilde: AugmentedAction,
    /// Shared by all three tokens.
    pub advantage: f64,
    /// Per-token log-probabilities under the behaviour policy.
    pub old_log_probs: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clip_eps: f64,
    pub kl_lambda: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { clip_eps: DEFAULT_CLIP_EPS, kl_lambda: DEFAULT_KL_LAMBDA }
    }
}

/// Sparse gradient over table rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub rows: BTreeMap<(Head, u64), Vec<f64>>,
}

impl Gradient {
    fn add(&mut self, head: Head, key: u64, len: usize, f: impl Fn(usize) -> f64) {
        let row = self.rows.entry((head, key)).or_insert_with(|| vec![0.0; len]);
        for (i, g) in row.iter_mut().enumerate() {
            *g += f(i);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Largest absolute entry-wise difference to another gradient.
    pub fn max_diff(&self, other: &Gradient) -> f64 {
        let mut worst: f64 = 0.0;
        for key in self.rows.keys().chain(other.rows.keys()) {
            let a = self.rows.get(key);
            let b = other.rows.get(key);
            let len = a.or(b).map_or(0, Vec::len);
            for i in 0..len {
                let x = a.map_or(0.0, |r| r[i]);
                let y = b.map_or(0.0, |r| r[i]);
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Per-sample terms shared by the objective and its gradient.
struct Evaluated {
    tokens: Tokens,
    logits: [Vec<f64>; 3],
    ref_logits: [Vec<f64>; 3],
    weights: [f64; 3],
}

fn evaluate(
    params: &PolicyParams,
    reference: &PolicyParams,
    world: &World,
    sample: &PolicySample,
) -> Result<Evaluated> {
    if !sample.advantage.is_finite() {
        return Err(Error::NonFinite(format!("advantage {}", sample.advantage)));
    }
    if sample.old_log_probs.iter().any(|l| !l.is_finite()) {
        return Err(Error::ZeroOldProbability);
    }
    let t = tokens(world, &sample.s_tilde, &sample.a_tilde)?;
    let key = [t.keys.cue, t.keys.memory, t.keys.action];
    let heads = [Head::Cue, Head::Memory, Head::Action];
    let logits = [0, 1, 2].map(|k| params.logits(heads[k], key[k], t.sizes[k]));
    let ref_logits = [0, 1, 2].map(|k| reference.logits(heads[k], key[k], t.sizes[k]));
    let weights = [0, 1, 2].map(|k| (log_softmax(&logits[k])[t.picks[k]] - sample.old_log_probs[k]).exp());
    Ok(Evaluated { tokens: t, logits, ref_logits, weights })
}

/// Clipped surrogate: batch mean of the token-mean `min(wA, clip(w)A)`,
/// minus `λ` times the batch mean of the summed per-row `KL(π_θ ‖ π_ref)`.
pub fn surrogate(
    params: &PolicyParams,
    world: &World,
    batch: &[PolicySample],
    cfg: SurrogateConfig,
    reference: &PolicyParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("policy batch"));
    }
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let mut objective = 0.0;
    let mut kl = 0.0;
    for sample in batch {
        let e = evaluate(params, reference, world, sample)?;
        let a = sample.advantage;
        objective += e.weights.iter().map(|&w| (w * a).min(w.clamp(lo, hi) * a)).sum::<f64>() / 3.0;
        kl += (0..3).map(|k| kl_logits(&e.logits[k], &e.ref_logits[k])).sum::<f64>();
    }
    let n = batch.len() as f64;
    Ok(objective / n - cfg.kl_lambda * kl / n)
}

/// Exact gradient of [`surrogate`] with respect to every visited logit.
pub fn policy_gradient(
    params: &PolicyParams,
    world: &World,
    batch: &[PolicySample],
    cfg: SurrogateConfig,
    reference: &PolicyParams,
) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::Empty("policy batch"));
    }
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let n = batch.len() as f64;
    let heads = [Head::Cue, Head::Memory, Head::Action];
    let keys_of = |t: &Tokens| [t.keys.cue, t.keys.memory, t.keys.action];
    let mut grad = Gradient::default();
    for sample in batch {
        let e = evaluate(params, reference, world, sample)?;
        let a = sample.advantage;
        let key = keys_of(&e.tokens);
        for k in 0..3 {
            let w = e.weights[k];
            let p = softmax(&e.logits[k]);
            let pick = e.tokens.picks[k];
            let len = p.len();
            // The unclipped branch is active unless clipping strictly lowers the term.
            if w * a <= w.clamp(lo, hi) * a {
                let scale = a * w / (3.0 * n);
                grad.add(heads[k], key[k], len, |i| scale * (f64::from(u8::from(i == pick)) - p[i]));
            }
            if cfg.kl_lambda != 0.0 {
                let lp = log_softmax(&e.logits[k]);
                let lr = log_softmax(&e.ref_logits[k]);
                let kl: f64 = (0..len).map(|i| p[i] * (lp[i] - lr[i])).sum();
                let scale = cfg.kl_lambda / n;
                grad.add(heads[k], key[k], len, |i| -scale * p[i] * (lp[i] - lr[i] - kl));
            }
        }
    }
    Ok(grad)
}
