//! `fos`: build datasets, train the foreground and query encoders, index,
//! search, evaluate and run the ablation study.

mod commands;
mod config;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fos_core::error::ErrorKind;

use crate::config::BadInput;

#[derive(Parser, Debug)]
#[command(name = "fos", version, about = "Interpretable foreground object search")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set foreground.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Random seed (falls back to the config, then FOS_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a dataset (images plus manifest) from the synthetic generator or
    /// an annotation document.
    BuildDataset(BuildDatasetArgs),
    /// Train the foreground encoder (teacher).
    TrainForeground(TrainForegroundArgs),
    /// Distill the teacher into a query encoder (student).
    TrainQuery(TrainQueryArgs),
    /// Embed every foreground of the dataset into an embedding store.
    Index(IndexArgs),
    /// Rank foregrounds for a background and rectangle.
    Search(SearchArgs),
    /// Score a student on the held-out evaluation set.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every ablation mode with shared seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    #[arg(long, conflicts_with = "annotations")]
    pub synthetic: bool,
    /// Annotation document (JSON) to ingest.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub patterns: Option<usize>,
    #[arg(long)]
    pub per_pattern: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainForegroundArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainQueryArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation mode.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Student whose own foreground tower should embed the database
    /// (multi-task and baseline-proxy students).
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Instance,
    Pattern,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub background: PathBuf,
    /// Normalized rectangle `cx,cy,w,h`.
    #[arg(long, allow_hyphen_values = true)]
    pub rect: String,
    #[arg(long, value_enum, default_value = "instance")]
    pub level: Level,
    #[arg(short = 'k', long, default_value_t = 5)]
    pub k: usize,
    /// Members shown per pattern in pattern-level grids.
    #[arg(long, default_value_t = 2)]
    pub per_pattern: usize,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// Dataset the store was built from (for grid images).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Write a retrieval-grid PNG here.
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Comma-separated modes; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error tag for a missing prerequisite artifact (exit code 3).
#[derive(Debug)]
pub struct MissingArtifact(pub String);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingArtifact {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<BadInput>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<MissingArtifact>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<fos_core::error::Error>() {
            return match e.kind() {
                ErrorKind::BadInput => 2,
                ErrorKind::MissingArtifact => 3,
                ErrorKind::CorruptArtifact => 4,
                ErrorKind::Internal => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
