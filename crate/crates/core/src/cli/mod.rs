//! Command-line surface: config, checkpoints and the four subcommands.

mod checkpoint;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use checkpoint::{CheckpointArchive, Section, DUALENC_ENCODER, DUALENC_PROMPTS, FORMAT_VERSION, MAGIC};
pub use commands::{
    checkpoint_path, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, evaluate_files, load_cascade, read_predictions, InferOptions,
    Phase, PredictionRecord, Query, RunDir, TrainOutcome, PREDICTIONS_FILE, PRODUCED_FILE, REPORT_JSON, REPORT_TABLE,
};
pub use config::{CheckpointConfig, DataConfig, PathsConfig, RunConfig, StorageDType};

use crate::cascade::StageTwoAlpha;
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "camoseg", version, about = "Open-vocabulary camouflaged object segmentation")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the configuration with ones derived from this value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Run one training phase.
    Train {
        #[arg(long, value_enum)]
        phase: Phase,
    },
    /// Segment and classify images (the test split by default).
    Infer {
        #[arg(long, value_enum, default_value = "predicted")]
        alpha: AlphaArg,
        #[arg(long, value_enum, default_value = "unseen")]
        query: Query,
        images: Vec<PathBuf>,
    },
    /// Score predictions against the test split.
    Eval {
        /// Predictions file; defaults to the run's own.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AlphaArg {
    Predicted,
    AllOne,
}

impl From<AlphaArg> for StageTwoAlpha {
    fn from(a: AlphaArg) -> Self {
        match a {
            AlphaArg::Predicted => StageTwoAlpha::Predicted,
            AlphaArg::AllOne => StageTwoAlpha::AllOne,
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg).map(drop),
        Command::Train { phase } => cmd_train(&cfg, *phase).map(drop),
        Command::Infer { alpha, query, images } => {
            let opts = InferOptions {
                images: images.clone(),
                alpha: (*alpha).into(),
                query: *query,
            };
            cmd_infer(&cfg, &opts).map(drop)
        }
        Command::Eval { predictions } => cmd_eval(&cfg, predictions.as_deref()).map(drop),
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_user_error() {
        EXIT_USER
    } else {
        EXIT_INTERNAL
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(_) => EXIT_INTERNAL,
    }
}
