mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use t2sg::datagen::DatasetError;
use t2sg::model::{CheckpointError, ModelError};
use t2sg::train::TrainError;

#[derive(Parser, Debug)]
#[command(name = "t2sg", version, about = "Traffic topology scene graphs: generate, train, evaluate, infer, plot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Dotted override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write train/val/test datasets.
    Gen,
    /// Train a model on the train split.
    Train,
    /// Score a model on a split and write a report.
    Eval,
    /// Predict the scene graph of one scene.
    Infer,
    /// Draw a scene or a prediction as SVG.
    Plot,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(n) => CliError::Numeric(n.to_string()),
            ModelError::Config(m) => CliError::Config(m),
            ModelError::Input(m) => CliError::Data(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            e @ (TrainError::Numeric(_) | TrainError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            e @ (TrainError::EmptyDataset | TrainError::Decode(_)) => CliError::Data(e.to_string()),
            TrainError::Io(io) => CliError::Io(io),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref(), cli.seed, &cli.sets)?;
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    log::info!("resolved configuration:\n{}", config::to_toml(&cfg));
    std::fs::create_dir_all(&cli.out)?;
    let ctx = commands::Context {
        cfg: &cfg,
        out: &cli.out,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Infer => commands::infer(&ctx),
        Command::Plot => commands::plot(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("t2sg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
