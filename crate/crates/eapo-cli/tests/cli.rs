use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use eapo::optim::{Mode, OptimConfig};
use eapo::reward::RewardWeights;
use eapo::worlds::WorldSpec;
use eapo_cli::{load_checkpoint, reward_audit, run_ablate, run_train, ExperimentConfig, RunManifest, RunStatus};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        world: WorldSpec::key_corridor(2, 1, 4),
        optim: OptimConfig { group_size: 4, epochs: 4, lr: 10.0, sft_lr: 1.0, sft_max_steps: 50, ..OptimConfig::default() },
        weights: RewardWeights { q_rollouts: 2, q_pairs: 2, beta: 2.0, q_lr: 1.0, ..RewardWeights::default() },
        seed: 3,
        checkpoint_every: 2,
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn eapo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_eapo")).args(args).env("EAPO_LOG_LEVEL", "warn").output().unwrap()
}

#[test]
fn bad_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cases = [
        "{ not json",
        r#"{"world": {"name": "key-corridor", "cells": 2, "panels": 1, "horizon": 4}, "colour": 1}"#,
        r#"{"world": {"name": "key-corridor", "cells": 2, "panels": 1, "horizon": 4}, "optim": {"group_size": 1}}"#,
        r#"{"world": {"name": "key-corridor", "cells": 2, "panels": 1, "horizon": 4}, "weights": {"gamma": 1.5}}"#,
    ];
    for text in cases {
        let path = dir.path().join("bad.json");
        fs::write(&path, text).unwrap();
        let o = eapo(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(!o.stderr.is_empty());
    }
    let o = eapo(&["train", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = eapo(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn one_epoch_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small());
    let out = dir.path().join("run");
    let start = Instant::now();
    let o = eapo(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs-override", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    assert_eq!(manifest.epochs_completed, 1);
    assert!(manifest.finished_at.is_some() && manifest.sft.is_some());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(out.join("checkpoints/final.json").exists());
}

#[test]
fn resumed_runs_match_straight_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let straight = dir.path().join("straight");
    run_train(&cfg, &straight, None).unwrap();

    let split = dir.path().join("split");
    let mut first = cfg.clone();
    first.optim.epochs = 2;
    run_train(&first, &split, None).unwrap();
    let manifest = run_train(&cfg, &split, Some(&split.join("checkpoints/epoch-00002.json"))).unwrap();
    assert_eq!(manifest.epochs_completed, 4);
    assert!(manifest.resumed_from.is_some());

    let a = fs::read_to_string(straight.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ca = load_checkpoint(&straight.join("checkpoints/final.json")).unwrap();
    let cb = load_checkpoint(&split.join("checkpoints/final.json")).unwrap();
    assert_eq!(ca.policy, cb.policy);
    assert_eq!(ca.reward_model, cb.reward_model);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(run_train(&other, &split, Some(&split.join("checkpoints/final.json"))).is_err());
}

#[test]
fn ablation_accounts_for_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.optim.epochs = 2;
    let modes = [Mode::Eapo, Mode::GrpoBaseline, Mode::NoExploreRewardAblation];
    let cells = run_ablate(&cfg, &modes, &[1, 2], dir.path()).unwrap();
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c.status == RunStatus::Complete));
    let comparison = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 1 + 6 * 2);
    for mode in modes {
        for seed in [1, 2] {
            let prefix = format!("{},{seed},", mode.name());
            assert_eq!(comparison.lines().filter(|l| l.starts_with(&prefix)).count(), 2);
        }
    }
}

#[test]
fn audit_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    run_train(&cfg, dir.path(), None).unwrap();
    let ck = load_checkpoint(&dir.path().join("checkpoints/final.json")).unwrap();
    let a = reward_audit(&ck, &[1, 3], 40, 9).unwrap();
    let b = reward_audit(&ck, &[1, 3], 40, 9).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.spearman.to_bits(), y.spearman.to_bits());
        assert!(x.spearman.is_nan() || (-1.0..=1.0).contains(&x.spearman));
        assert_eq!(x.samples, 40);
    }
}
