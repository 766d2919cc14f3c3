//! WebAssembly bindings for the `www/` demo page.
//!
//! Every export returns JSON text so the page can stay dependency free. The
//! plain functions are usable natively; the `#[wasm_bindgen]` wrappers only
//! convert errors into JS exceptions.

use eapo::mdp::GoalId;
use eapo::optim::{self, Mode, OptimConfig};
use eapo::policy::PolicyParams;
use eapo::reward::{bayes_explore, RewardModel, RewardWeights};
use eapo::structured_io;
use eapo::worlds::{World, WorldSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// `max{q1, γ²q2}` on `points` evenly spaced discounts in `[0, 1]`.
pub fn explore_curve(q1: f64, q2: f64, points: usize) -> Result<Vec<(f64, f64)>, String> {
    if points < 2 {
        return Err("need at least two points".into());
    }
    if !(0.0..=1.0).contains(&q1) || !(0.0..=1.0).contains(&q2) {
        return Err("densities must lie in [0, 1]".into());
    }
    Ok((0..points)
        .map(|i| {
            let gamma = i as f64 / (points - 1) as f64;
            (gamma, bayes_explore(q1, q2, gamma))
        })
        .collect())
}

fn world_spec(world: &str, a: usize, b: usize, horizon: usize) -> Result<WorldSpec, String> {
    let spec = WorldSpec::by_name(world, [a, b], horizon).map_err(|e| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Serialize)]
struct EpochPoint {
    epoch: usize,
    success_rate: f64,
    exploration_degree: f64,
    mean_episode_steps: f64,
    reward_explore: f64,
}

#[derive(Serialize)]
struct TrainSeries {
    mode: &'static str,
    recovery_rate: f64,
    epochs: Vec<EpochPoint>,
}

/// Trains from scratch and returns the per-epoch curves.
pub fn train_series(
    world: &str,
    a: usize,
    b: usize,
    horizon: usize,
    mode: &str,
    epochs: usize,
    seed: u64,
) -> Result<String, String> {
    let spec = world_spec(world, a, b, horizon)?;
    let mode = Mode::parse(mode).map_err(|e| e.to_string())?;
    if epochs > 2000 {
        return Err("at most 2000 epochs".into());
    }
    let config = OptimConfig { group_size: 8, lr: 100.0, sft_lr: 1.0, epochs, mode, q_steps: 2, ..OptimConfig::default() };
    let weights = RewardWeights { beta: 10.0, q_lr: 5.0, q_rollouts: 4, q_pairs: 4, ..RewardWeights::default() };
    let outcome = optim::train(&spec, &config, &weights, seed).map_err(|e| e.to_string())?;
    let series = TrainSeries {
        mode: mode.name(),
        recovery_rate: outcome.sft.recovery_rate,
        epochs: outcome
            .rows
            .iter()
            .map(|r| EpochPoint {
                epoch: r.epoch,
                success_rate: r.success_rate,
                exploration_degree: r.exploration_degree,
                mean_episode_steps: r.mean_episode_steps,
                reward_explore: r.reward_explore,
            })
            .collect(),
    };
    serde_json::to_string(&series).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct StepView {
    state: u32,
    depth: usize,
    text: String,
    reward: f64,
    advantage: f64,
}

#[derive(Serialize)]
struct RolloutView {
    success: bool,
    steps: Vec<StepView>,
}

/// One group collection under the untrained policy, with grouped advantages.
pub fn group_rollouts(
    world: &str,
    a: usize,
    b: usize,
    horizon: usize,
    group_size: usize,
    seed: u64,
) -> Result<String, String> {
    let spec = world_spec(world, a, b, horizon)?;
    let world = World::new(&spec).map_err(|e| e.to_string())?;
    if group_size > 64 {
        return Err("at most 64 rollouts".into());
    }
    let policy = PolicyParams::new();
    let mut trajs =
        optim::collect_group_rollouts(&policy, &world, GoalId(0), seed, group_size, seed).map_err(|e| e.to_string())?;
    let weights = RewardWeights::default();
    optim::assign_rewards(&mut trajs, &RewardModel::new(), &world, &weights, Mode::Eapo);
    let (groups, advantages) = optim::compute_advantages(&trajs, Mode::Eapo, weights.gamma).map_err(|e| e.to_string())?;
    let mut advantage: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.transitions.len()]).collect();
    for (group, advs) in groups.values().zip(&advantages) {
        for (&(i, t), adv) in group.members.iter().zip(advs) {
            advantage[i][t] = adv.value;
        }
    }
    let views: Vec<RolloutView> = trajs
        .iter()
        .zip(&advantage)
        .map(|(traj, advs)| RolloutView {
            success: traj.success,
            steps: traj
                .transitions
                .iter()
                .zip(advs)
                .map(|(tr, &advantage)| StepView {
                    state: tr.s_tilde.env.id,
                    depth: tr.depth,
                    text: format!(
                        "{} | {} | {}",
                        structured_io::serialize_cue(tr.a_tilde.cue),
                        structured_io::serialize_memory(&tr.a_tilde.memory),
                        tr.a_tilde.act
                    ),
                    reward: tr.reward.map_or(0.0, |r| r.total),
                    advantage,
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&views).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = exploreCurve)]
pub fn explore_curve_js(q1: f64, q2: f64, points: usize) -> Result<String, JsError> {
    let curve = explore_curve(q1, q2, points).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&curve).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = trainSeries)]
#[allow(clippy::too_many_arguments)]
pub fn train_series_js(
    world: &str,
    a: usize,
    b: usize,
    horizon: usize,
    mode: &str,
    epochs: usize,
    seed: u32,
) -> Result<String, JsError> {
    train_series(world, a, b, horizon, mode, epochs, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = groupRollouts)]
pub fn group_rollouts_js(
    world: &str,
    a: usize,
    b: usize,
    horizon: usize,
    group_size: usize,
    seed: u32,
) -> Result<String, JsError> {
    group_rollouts(world, a, b, horizon, group_size, seed.into()).map_err(|e| JsError::new(&e))
}
