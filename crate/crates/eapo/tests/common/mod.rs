#![allow(dead_code)]

use eapo::mdp::{AugmentedState, ExplorationCue, GoalId};
use eapo::policy::{memory_options, row_keys, Head, PolicyParams};
use eapo::rng::StreamRng;
use eapo::worlds::{World, WorldSpec};
use rand::Rng;

pub fn worlds() -> Vec<World> {
    [WorldSpec::key_corridor(2, 1, 4), WorldSpec::key_corridor(3, 2, 10), WorldSpec::shop_sim(2, 2, 8)]
        .iter()
        .map(|s| World::new(s).unwrap())
        .collect()
}

fn fill(row: &mut [f64], rng: &mut StreamRng, scale: f64) {
    for z in row {
        *z = scale * (rng.gen::<f64>() * 2.0 - 1.0);
    }
}

/// Random logits on every row of every goal.
pub fn random_policy(world: &World, rng: &mut StreamRng, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::new();
    let cues = world.cue_count() as usize;
    for g in 0..world.goals().len() {
        for env in world.states().iter().filter(|s| !world.is_terminal(s)) {
            for memory in world.consistent_memories() {
                for prev in world.cues() {
                    let s = AugmentedState { goal: GoalId(g as u16), env: *env, cue: prev, memory: memory.clone() };
                    let Ok(k) = row_keys(world, &s, ExplorationCue::None, 0) else { continue };
                    fill(p.row_mut(Head::Cue, k.cue, cues), rng, scale);
                    let options = memory_options(world, &s).len();
                    let legal = world.legal_actions(env).len();
                    for cue in world.cues() {
                        let k = row_keys(world, &s, cue, 0).unwrap();
                        fill(p.row_mut(Head::Memory, k.memory, options), rng, scale);
                        for choice in 0..options {
                            let k = row_keys(world, &s, cue, choice).unwrap();
                            fill(p.row_mut(Head::Action, k.action, legal), rng, scale);
                        }
                    }
                }
            }
        }
    }
    p
}
