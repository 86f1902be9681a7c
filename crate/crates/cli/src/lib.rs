//! `gazelle`: import datasets, train and finetune the gaze decoder, evaluate,
//! predict with heatmap overlays, run ablations and time multi-person inference.
//!
//! Every command prints a JSON summary on stdout. Failures print
//! `{"error": {...}}` on stderr and exit with 2 for usage or configuration
//! problems and 1 for runtime failures.

pub mod ablate;
pub mod bboxes;
pub mod commands;
pub mod config;
pub mod error;
pub mod overlay;
pub mod scaling;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use crate::config::RunConfig;
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gazelle", version, about = "Gaze target estimation with a frozen scene encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a public dataset's annotations to JSON-lines records.
    Import(ImportArgs),
    /// Train the decoder from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint with per-group learning rates.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Predict gaze heatmaps for the people in one image.
    Predict(PredictArgs),
    /// Train and compare a suite of model variants.
    Ablate(AblateArgs),
    /// Time inference for 1..N people on one image.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ImportFormat {
    Gazefollow,
    VideoAttentionTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    Gazefollow,
    Tolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FinetuneProfile {
    VideoAttentionTarget,
    Childplay,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long, value_enum)]
    pub format: ImportFormat,
    /// Annotation CSV (GazeFollow) or dataset root (VideoAttentionTarget).
    #[arg(long)]
    pub input: PathBuf,
    /// Where image paths are resolved; defaults to the CSV's directory.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: SplitArg,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Pretrained weights to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces epochs, parameter groups and loss weight with a preset.
    #[arg(long, value_enum)]
    pub profile: Option<FinetuneProfile>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `eval`.
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Radius in heatmap pixels for the tolerance protocol.
    #[arg(long, default_value_t = gazelle_core::metrics::DEFAULT_TOLERANCE_PX)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Head boxes as inline JSON or a JSON file.
    #[arg(long)]
    pub bboxes: Option<String>,
    /// Supplies the backbone when the checkpoint does not record one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: ablate::Suite,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Backbone and decoder; the toy backbone and default decoder otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image to run on; a blank frame otherwise.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub max_persons: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::usage("usage", e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match commands::execute(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            0
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}
