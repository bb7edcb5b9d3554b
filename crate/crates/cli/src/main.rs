//! `ensteer` — experiment harness for steering point ensembles with a
//! controlled dynamical system: generate a dataset, train a control on a
//! prefix, expand the training set and tune without forgetting (or with the
//! penalty baseline), evaluate, and probe joint-training scaling.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or command usage (exit code 2).
    Config(String),
    /// Filesystem problems (exit code 3).
    Io(String),
    /// An optimization did not reach its target (exit code 4).
    NonConvergence(String),
    /// Anything else (exit code 1).
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::NonConvergence(m) | CliError::Other(m) => m,
        }
    }
}

impl From<ensteer_core::Error> for CliError {
    fn from(e: ensteer_core::Error) -> CliError {
        use ensteer_core::Error::*;
        match e {
            Io(inner) => CliError::Io(inner.to_string()),
            NonConvergence { .. } => CliError::NonConvergence(e.to_string()),
            Parse { .. } | InvalidConfig(_) | InvalidEnsemble(_) | IndexOutOfRange { .. }
            | Dimension { .. } | GenerationFailed { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ensteer",
    version,
    about = "Steer point ensembles with a controlled dynamical system and tune the control without forgetting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (flat key = value lines, # comments, sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set tuner.rounds=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for inputs and outputs
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled unit-ball dataset
    GenData(CommonArgs),
    /// Train a control on the first j samples (joint or from-scratch)
    Train(CommonArgs),
    /// Tune the trained control on samples j+1..q without forgetting 1..j
    Tune(CommonArgs),
    /// Penalty-method fine-tuning baseline over the full ensemble
    Penalty(CommonArgs),
    /// Evaluate a control checkpoint on the prefix/new/all sample sets
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Control checkpoint to evaluate
        #[arg(long)]
        control: PathBuf,
    },
    /// Measure per-iteration wall time of folded joint training across q
    Scaling(CommonArgs),
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => {
            let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
            commands::gen_data(&config, &args.out)
        }
        Command::Train(args) => {
            let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
            commands::train(&config, &args.out)
        }
        Command::Tune(args) => {
            let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
            commands::tune(&config, &args.out)
        }
        Command::Penalty(args) => {
            let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
            commands::penalty(&config, &args.out)
        }
        Command::Eval { common, control } => {
            let config = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
            commands::eval(&config, &common.out, &control)
        }
        Command::Scaling(args) => {
            let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
            commands::scaling(&config, &args.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
