//! Command-line front end: `asymnet train|prune|analyze --config <path>`.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, ExperimentKind};

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<asymnet::Error> for CliError {
    fn from(e: asymnet::Error) -> Self {
        match e {
            asymnet::Error::State(_) => CliError::Internal(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "asymnet", version, about = "Train, prune and analyze asymmetric networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network or shallow model (kind = "train").
    Train(RunArgs),
    /// Prune a trained network (kind = "prune").
    Prune(RunArgs),
    /// Alignment, sorting or repeatability analysis.
    Analyze(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trained model to prune or analyze instead of training one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::Analyze(_) => "analyze",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a) | Command::Prune(a) | Command::Analyze(a) => a,
        }
    }

    pub fn accepts(&self, kind: ExperimentKind) -> bool {
        match self {
            Command::Train(_) => kind == ExperimentKind::Train,
            Command::Prune(_) => kind == ExperimentKind::Prune,
            Command::Analyze(_) => matches!(
                kind,
                ExperimentKind::AnalyzeGaussian | ExperimentKind::AnalyzeSorting | ExperimentKind::Repeatability
            ),
        }
    }
}

/// Loads and validates the config, then runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    let (mut cfg, base) = ExperimentConfig::load(&args.config)?;
    if !cli.command.accepts(cfg.kind) {
        return Err(CliError::User(format!(
            "`{}` cannot run a config of kind {:?}",
            cli.command.name(),
            cfg.kind
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    commands::execute(&cfg, &base, args.model.as_deref())
}
