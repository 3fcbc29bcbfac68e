//! `c3lr`: pre-train, evaluate and inspect from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable that overrides the configured dataset root.
pub const DATASET_ROOT_ENV: &str = "C3LR_DATASET_ROOT";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "c3lr", version, about = "Class-cognizant contrastive pre-training and few-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory of the experiment directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset root; `C3LR_DATASET_ROOT` takes precedence over the config and
    /// this flag over both.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
}

/// Episode shape overrides.
#[derive(Debug, Clone, Args)]
pub struct TaskFlags {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train an encoder on the train split (resumes automatically).
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskFlags,
        /// Override `pretrain.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Few-shot evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskFlags,
        /// Defaults to `<out>/<name>/checkpoints/final.ckpt`.
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized encoder instead.
        #[arg(long)]
        untrained: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Cluster one pre-training batch and dump the intermediate matrices.
    InspectClusters {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        untrained: bool,
        #[arg(long, default_value = "train")]
        split: String,
        /// Batch originals (`L`); defaults to the config.
        #[arg(long)]
        originals: Option<usize>,
        /// Views per original (`Q`); defaults to the config.
        #[arg(long)]
        views: Option<usize>,
        /// Sample the batch that pre-training would draw at this step.
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Write the procedural glyph dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Classes per split, as `train,val,test`.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        #[arg(long)]
        drawings: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, task, steps } => commands::pretrain(&common, &task, steps),
        Command::Evaluate {
            common,
            task,
            checkpoint,
            untrained,
            split,
        } => commands::evaluate(&common, &task, checkpoint, untrained, &split),
        Command::InspectClusters {
            common,
            checkpoint,
            untrained,
            split,
            originals,
            views,
            step,
        } => commands::inspect(
            &common,
            &commands::InspectArgs {
                checkpoint,
                untrained,
                split,
                originals,
                views,
                step,
            },
        ),
        Command::MakeSynthetic {
            out,
            seed,
            classes,
            drawings,
        } => commands::make_synthetic(&out, seed, classes, drawings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
