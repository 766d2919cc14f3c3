use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eapo::optim::Mode;
use eapo_cli::{CliError, ExperimentConfig, Overrides, RunStatus};

#[derive(Parser)]
#[command(name = "eapo", version, about = "Exploration-aware policy optimisation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rollback fine-tuning followed by reinforcement learning.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Checkpoint to continue from; its embedded config is used when --config is absent.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs_override: Option<usize>,
        #[arg(long)]
        gamma_override: Option<f64>,
    },
    /// Every mode × seed cell plus a joined comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "eapo,grpo-baseline")]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs_override: Option<usize>,
        #[arg(long)]
        gamma_override: Option<f64>,
    },
    /// Rank correlation of the learned exploratory reward against online rollouts.
    RewardAudit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn load(config: Option<&PathBuf>, resume: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    match (config, resume) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(ck)) => {
            let ck = eapo_cli::load_checkpoint(ck)?;
            Ok(ExperimentConfig {
                world: ck.spec,
                optim: ck.config,
                weights: ck.weights,
                seed: ck.run_seed,
                checkpoint_every: 50,
            })
        }
        (None, None) => Err(CliError::Config("--config is required unless --resume is given".into())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed, mode, resume, epochs_override, gamma_override } => {
            let mut cfg = load(config.as_ref(), resume.as_ref())?;
            Overrides { seed, mode, epochs: epochs_override, gamma: gamma_override }.apply(&mut cfg)?;
            eapo_cli::run_train(&cfg, &out, resume.as_deref())?;
        }
        Command::Ablate { config, out, modes, seeds, epochs_override, gamma_override } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides { epochs: epochs_override, gamma: gamma_override, ..Default::default() }.apply(&mut cfg)?;
            let cells = eapo_cli::run_ablate(&cfg, &modes, &seeds, &out)?;
            let failed = cells.iter().filter(|c| c.status != RunStatus::Complete).count();
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} of {} cells failed", cells.len())));
            }
        }
        Command::RewardAudit { checkpoint, out, k, samples, seed } => {
            for row in eapo_cli::run_reward_audit(&checkpoint, &k, samples, seed, &out)? {
                println!("k={} spearman={:.4}", row.k, row.spearman);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EAPO_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eapo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
