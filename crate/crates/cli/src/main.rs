use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saeval_cli::config::RunConfig;
use saeval_cli::error::StageError;
use saeval_cli::stages;

/// Cross-section discovery and dictionary-based evaluation of sparse
/// autoencoders on a desk-scale transformer.
#[derive(Parser)]
#[command(name = "saeval", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding all stage artifacts.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Task operations.
    Task {
        #[command(subcommand)]
        command: TaskCommand,
    },
    /// Model operations.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Sparse autoencoder operations.
    Sae {
        #[command(subcommand)]
        command: SaeCommand,
    },
    /// Discover and filter attribute cross-sections.
    Discover(StageArgs),
    /// Fit supervised feature dictionaries at the retained cross-sections.
    FitDict(StageArgs),
    /// Evaluation tests.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Aggregate both tests into the CSV report.
    Report(StageArgs),
    /// Write the default induction run configuration to stdout.
    DefaultConfig {
        /// Seed recorded in the emitted configuration.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TaskCommand {
    /// Generate the task document (samples induction sequences with the
    /// trained model).
    Gen(StageArgs),
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Train the transformer to criterion accuracy.
    Train(StageArgs),
}

#[derive(Subcommand)]
enum SaeCommand {
    /// Train the residual-stream sparse autoencoder.
    Train(StageArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Sufficiency / necessity scoring.
    Test1(StageArgs),
    /// Sparse-controllability edits.
    Test2(StageArgs),
}

fn load_config(args: &StageArgs, stage: &str) -> Result<RunConfig, StageError> {
    let bytes = std::fs::read(&args.config).map_err(|e| {
        StageError::with_artifact(stage, format!("cannot read config: {e}"), args.config.display().to_string())
    })?;
    serde_json::from_slice(&bytes).map_err(|e| {
        StageError::with_artifact(stage, format!("bad config: {e}"), args.config.display().to_string())
    })
}

fn dispatch(command: Command) -> Result<(), StageError> {
    let run = |args: StageArgs, stage: &str| -> Result<(), StageError> {
        let config = load_config(&args, stage)?;
        stages::run_stage(&args.run, &config, stage)
    };
    match command {
        Command::Task { command: TaskCommand::Gen(args) } => run(args, "task"),
        Command::Model { command: ModelCommand::Train(args) } => run(args, "model"),
        Command::Sae { command: SaeCommand::Train(args) } => run(args, "sae"),
        Command::Discover(args) => run(args, "discover"),
        Command::FitDict(args) => run(args, "fit-dict"),
        Command::Eval { command: EvalCommand::Test1(args) } => run(args, "test1"),
        Command::Eval { command: EvalCommand::Test2(args) } => run(args, "test2"),
        Command::Report(args) => run(args, "report"),
        Command::DefaultConfig { seed } => {
            let config = RunConfig::default_induction(seed);
            let mut text = serde_json::to_string_pretty(&config)
                .map_err(|e| StageError::new("config", e.to_string()))?;
            text.push('\n');
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}
