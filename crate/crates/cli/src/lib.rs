//! Experiment runner for the diffusion transfer lab: configuration, the
//! `difftune` command line, and artifact emission.

pub mod config;
pub mod error;
pub mod runner;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, ExperimentKind, RawConfig};
pub use error::{CliError, Result};
pub use runner::{run, RunOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "difftune",
    version,
    about = "Transfer-learning lab for toy diffusion models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on the source distribution.
    Pretrain(CommonArgs),
    /// Sample a retention bank from the pre-trained checkpoint.
    MakeBank(CommonArgs),
    /// Fine-tune the pre-trained checkpoint on the target data.
    Finetune(CommonArgs),
    /// Replace a growing share of the final sampling steps with the pre-trained model.
    ForgettingSweep(CommonArgs),
    /// Fine-tune once per value of the coefficient exponent.
    TauSweep(CommonArgs),
    /// Fine-tune once per retention bank size.
    BankSizeSweep(CommonArgs),
    /// Evaluate a checkpoint against fresh target samples.
    Eval(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file with `[section]` headers and `key = value` lines.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides `experiment.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override any key, e.g. `--set train.tau=0.5`. May be repeated.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved configuration and exit without running.
    #[arg(long)]
    pub dry_run: bool,
}

impl Command {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Command::Pretrain(_) => ExperimentKind::Pretrain,
            Command::MakeBank(_) => ExperimentKind::MakeBank,
            Command::Finetune(_) => ExperimentKind::Finetune,
            Command::ForgettingSweep(_) => ExperimentKind::ForgettingSweep,
            Command::TauSweep(_) => ExperimentKind::TauSweep,
            Command::BankSizeSweep(_) => ExperimentKind::BankSizeSweep,
            Command::Eval(_) => ExperimentKind::Eval,
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Pretrain(a)
            | Command::MakeBank(a)
            | Command::Finetune(a)
            | Command::ForgettingSweep(a)
            | Command::TauSweep(a)
            | Command::BankSizeSweep(a)
            | Command::Eval(a) => a,
        }
    }
}

/// Resolves the configuration for a command: file, then flags, then the
/// subcommand's kind.
pub fn resolve(command: &Command) -> Result<ExperimentConfig> {
    let args = command.args();
    let mut raw = match &args.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for o in &args.overrides {
        raw.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        raw.set("experiment", "seed", &seed.to_string());
    }
    if let Some(dir) = &args.out_dir {
        raw.set("io", "out_dir", &dir.to_string_lossy());
    }
    raw.set("experiment", "kind", command.kind().as_str());
    ExperimentConfig::from_raw(&raw)
}
