//! Experiment runner: JSON configs, run manifests, per-epoch metrics,
//! checkpoints, ablation sweeps and reward audits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use eapo::mdp::{AugmentedState, GoalId, Trajectory, Transition};
use eapo::metrics::{self, MetricRow};
use eapo::optim::{Checkpoint, Mode, OptimConfig, SftReport, Trainer};
use eapo::reward::{online_exploratory_reward, RewardWeights};
use eapo::rng::{self, domain};
use eapo::worlds::{World, WorldInstance, WorldSpec};
use log::{error, info};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const AUDIT_FILE: &str = "audit.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<eapo::Error> for CliError {
    fn from(e: eapo::Error) -> Self {
        match e {
            eapo::Error::InvalidSpec(_) | eapo::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: RewardWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(world: WorldSpec) -> Self {
        ExperimentConfig {
            world,
            optim: OptimConfig::default(),
            weights: RewardWeights::default(),
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.optim.validate()?;
        self.weights.validate()?;
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub epochs: Option<usize>,
    pub gamma: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> CliResult<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.optim.mode = mode;
        }
        if let Some(epochs) = self.epochs {
            cfg.optim.epochs = epochs;
        }
        if let Some(gamma) = self.gamma {
            cfg.weights.gamma = gamma;
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics_csv: String,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub run_seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub artifacts: Artifacts,
    pub code_version: String,
    pub epochs_completed: usize,
    pub sft: Option<SftReport>,
    pub resumed_from: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().into_owned()
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:05}.json")
}

/// Runs rollback fine-tuning and `cfg.optim.epochs` epochs, writing
/// `manifest.json`, `metrics.csv` and `checkpoints/` under `out`.
///
/// With `resume`, training continues from the checkpoint's epoch counter and
/// the existing metrics file is truncated to the checkpointed epochs.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> CliResult<RunManifest> {
    cfg.validate()?;
    let resumed = resume.map(load_checkpoint).transpose()?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        run_seed: cfg.seed,
        started_at: now(),
        finished_at: None,
        status: RunStatus::Incomplete,
        artifacts: Artifacts { metrics_csv: METRICS_FILE.into(), checkpoints: Vec::new() },
        code_version: CODE_VERSION.into(),
        epochs_completed: 0,
        sft: None,
        resumed_from: resume.map(|p| p.to_string_lossy().into_owned()),
        error: None,
    };
    if let Some(ck) = &resumed {
        if ck.spec != cfg.world || ck.weights != cfg.weights || ck.run_seed != cfg.seed {
            return Err(CliError::Config("checkpoint does not match the config's world, weights or seed".into()));
        }
        let mut expected = cfg.optim.clone();
        expected.epochs = ck.config.epochs;
        if expected != ck.config {
            return Err(CliError::Config("checkpoint optimiser settings differ from the config".into()));
        }
        if let Ok(previous) = RunManifest::load(&manifest_path) {
            manifest.artifacts.checkpoints = previous
                .artifacts
                .checkpoints
                .into_iter()
                .filter(|c| out.join(c).exists())
                .collect();
        }
    }
    write_json(&manifest_path, &manifest)?;

    let result = train_loop(cfg, out, &metrics_path, &ckpt_dir, resumed, &mut manifest);
    manifest.finished_at = Some(now());
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            write_json(&manifest_path, &manifest)?;
            info!("run complete: {} epochs in {}", manifest.epochs_completed, out.display());
            Ok(manifest)
        }
        Err(e) => {
            error!("run aborted: {e}");
            manifest.error = Some(e.to_string());
            write_json(&manifest_path, &manifest)?;
            Err(e)
        }
    }
}

fn train_loop(
    cfg: &ExperimentConfig,
    out: &Path,
    metrics_path: &Path,
    ckpt_dir: &Path,
    resumed: Option<Checkpoint>,
    manifest: &mut RunManifest,
) -> CliResult<()> {
    let mut rows: Vec<MetricRow>;
    let mut trainer = match resumed {
        Some(ck) => {
            let start = ck.epoch;
            manifest.sft = ck.sft.clone();
            let text = fs::read_to_string(metrics_path).unwrap_or_default();
            rows = if text.trim().is_empty() { Vec::new() } else { metrics::from_csv(&text)? };
            rows.retain(|r| r.epoch < start);
            if rows.len() != start {
                return Err(CliError::Runtime(format!(
                    "metrics file holds {} of the {start} checkpointed epochs",
                    rows.len()
                )));
            }
            info!("resuming at epoch {start}");
            Trainer::from_checkpoint(ck)?
        }
        None => {
            rows = Vec::new();
            let mut trainer = Trainer::new(&cfg.world, &cfg.optim, &cfg.weights, cfg.seed)?;
            let sft = trainer.run_sft()?;
            info!(
                "rollback fine-tuning: {} pairs, {} steps, recovery {:.3}",
                sft.dataset_size,
                sft.losses.len(),
                sft.recovery_rate
            );
            manifest.sft = Some(sft);
            trainer
        }
    };
    write_atomic(metrics_path, metrics::to_csv(&rows).as_bytes())?;
    let mut file = fs::OpenOptions::new().append(true).open(metrics_path).map_err(|e| io_err(metrics_path, e))?;
    manifest.epochs_completed = trainer.epoch();

    let save = |trainer: &Trainer, name: String, manifest: &mut RunManifest| -> CliResult<()> {
        let path = ckpt_dir.join(name);
        write_json(&path, trainer.checkpoint())?;
        let rel = relative(out, &path);
        if !manifest.artifacts.checkpoints.contains(&rel) {
            manifest.artifacts.checkpoints.push(rel);
        }
        Ok(())
    };

    while trainer.epoch() < cfg.optim.epochs {
        let row = trainer.run_epoch()?;
        writeln!(file, "{}", row.to_csv()).map_err(|e| io_err(metrics_path, e))?;
        log::debug!(
            "epoch {}: success {:.3} exploration {:.3} steps {:.2}",
            row.epoch,
            row.success_rate,
            row.exploration_degree,
            row.mean_episode_steps
        );
        if trainer.epoch() % cfg.checkpoint_every == 0 {
            save(&trainer, checkpoint_name(trainer.epoch()), manifest)?;
            info!("epoch {}: success {:.3}", row.epoch, row.success_rate);
        }
        manifest.epochs_completed = trainer.epoch();
        rows.push(row);
    }
    file.flush().map_err(|e| io_err(metrics_path, e))?;
    save(&trainer, "final.json".into(), manifest)?;
    Ok(())
}

/// Outcome of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub dir: String,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub fn cell_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.name()).join(format!("seed-{seed}"))
}

/// Runs every `mode × seed` cell under `out/<mode>/seed-<seed>/` and joins
/// their metrics into `comparison.csv`. Failed cells are recorded and skipped.
pub fn run_ablate(cfg: &ExperimentConfig, modes: &[Mode], seeds: &[u64], out: &Path) -> CliResult<Vec<CellOutcome>> {
    cfg.validate()?;
    if modes.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one mode and one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut cells = Vec::new();
    let mut comparison = format!("mode,seed,{}\n", metrics::CSV_HEADER);
    for &mode in modes {
        for &seed in seeds {
            let mut cell = cfg.clone();
            cell.optim.mode = mode;
            cell.seed = seed;
            let dir = cell_dir(out, mode, seed);
            info!("ablation cell {} seed {seed}", mode.name());
            let outcome = match run_train(&cell, &dir, None) {
                Ok(_) => {
                    let path = dir.join(METRICS_FILE);
                    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                    for line in text.lines().skip(1) {
                        comparison.push_str(&format!("{},{seed},{line}\n", mode.name()));
                    }
                    CellOutcome { mode, seed, dir: relative(out, &dir), status: RunStatus::Complete, error: None }
                }
                Err(e) => {
                    error!("cell {} seed {seed} failed: {e}", mode.name());
                    CellOutcome {
                        mode,
                        seed,
                        dir: relative(out, &dir),
                        status: RunStatus::Incomplete,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(outcome);
        }
    }
    write_atomic(&out.join(COMPARISON_FILE), comparison.as_bytes())?;
    write_json(&out.join("cells.json"), &cells)?;
    Ok(cells)
}

/// Rank correlation between the learned and online exploratory rewards for
/// one rollout budget `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub k: usize,
    pub samples: usize,
    pub spearman: f64,
}

/// A sampled transition with the context needed for online scoring.
struct AuditSample {
    transition: Transition,
    hidden: eapo::worlds::Hidden,
}

fn sample_transitions(ck: &Checkpoint, world: &World, samples: usize, seed: u64) -> CliResult<Vec<AuditSample>> {
    let mut out = Vec::new();
    let n_goals = world.goals().len();
    let mut episode = 0u64;
    while out.len() < samples {
        let goal = GoalId((episode % n_goals as u64) as u16);
        let episode_seed = rng::derive_seed(&[seed, domain::AUDIT, episode]);
        let mut inst = WorldInstance::reset(world, goal, episode_seed);
        let mut r = rng::stream(&[seed, domain::AUDIT, episode, 1]);
        let mut s = AugmentedState::initial(goal, inst.current());
        let mut history = Vec::new();
        let mut transitions = Vec::new();
        while !inst.is_done() {
            let a = ck.policy.sample(world, &s, &mut r)?.action;
            let step = inst.step(a.act)?;
            let next = AugmentedState { goal, env: step.next, cue: a.cue, memory: a.memory.clone() };
            transitions.push(Transition {
                s_tilde: s.clone(),
                a_tilde: a,
                s_tilde_next: next.clone(),
                step: transitions.len(),
                depth: eapo::mdp::visitation_depth(&history, &s.env),
                env_reward: if step.success { 1.0 } else { 0.0 },
                format_ok: true,
                reward: None,
            });
            history.push(s.env);
            s = next;
        }
        let traj = Trajectory::new(transitions, inst.is_done() && world.is_success(&inst.current()), episode_seed);
        out.extend(traj.transitions.into_iter().map(|transition| AuditSample { transition, hidden: inst.hidden() }));
        episode += 1;
    }
    out.truncate(samples);
    Ok(out)
}

/// Audits a checkpoint's reward model against online rollouts for every `k`.
pub fn reward_audit(ck: &Checkpoint, ks: &[usize], samples: usize, seed: u64) -> CliResult<Vec<AuditRow>> {
    if ks.is_empty() || samples < 2 {
        return Err(CliError::Config("audit needs at least one k and two samples".into()));
    }
    let world = World::new(&ck.spec)?;
    let gamma = ck.weights.gamma;
    let data = sample_transitions(ck, &world, samples, seed)?;
    let learned: Vec<f64> = data.iter().map(|d| ck.reward_model.explore_reward(&world, &d.transition, gamma)).collect();
    ks.iter()
        .map(|&k| {
            let online = data
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut r = rng::stream(&[seed, domain::AUDIT, k as u64, i as u64, 2]);
                    let t = d.transition.step;
                    online_exploratory_reward(&ck.policy, &world, d.hidden, &d.transition, t, gamma, k, &mut r)
                        .map(|o| o.value)
                })
                .collect::<eapo::Result<Vec<f64>>>()?;
            Ok(AuditRow { k, samples, spearman: metrics::spearman(&learned, &online) })
        })
        .collect()
}

/// Runs [`reward_audit`] and writes `audit.csv` under `out`.
pub fn run_reward_audit(checkpoint: &Path, ks: &[usize], samples: usize, seed: u64, out: &Path) -> CliResult<Vec<AuditRow>> {
    let ck = load_checkpoint(checkpoint)?;
    let rows = reward_audit(&ck, ks, samples, seed)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut text = String::from("k,samples,spearman\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.k, r.samples, metrics::fmt_sig(r.spearman)));
    }
    write_atomic(&out.join(AUDIT_FILE), text.as_bytes())?;
    Ok(rows)
}
