//! `slumseg`: corpus synthesis, data-quality reports, training, evaluation,
//! ablations and prototype-bank export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "slumseg", version, about = "Semi-supervised informal-settlement segmentation at desk scale")]
pub struct Cli {
    /// Experiment config (TOML); defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment seed. For `synth` it seeds the corpus instead.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Labeled budget: 0.1, 0.2, 0.3 or 1.0.
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// supervised | static_threshold | caat_only | bank_only | full
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: tiles/, masks/, manifest.csv.
    Synth,
    /// Data-quality report of a corpus: report.json, features.csv and
    /// histogram CSVs.
    Dataq {
        /// Corpus directory written by `synth`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Compare a stratified subset of this many tiles against the corpus.
        #[arg(long)]
        subset_size: Option<usize>,
    },
    /// Train one method: runlog.jsonl, checkpoints/, metrics.json.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps between checkpoints; the final step is always saved.
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Per-class IoU and mIoU of a checkpoint, printed as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and evaluate every method x budget x seed cell: ablation.csv.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write a checkpoint's prototype queues as bank_class{c}_epoch{e}.csv.
    ExportBank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Epoch label; derived from the checkpoint's step count when absent.
        #[arg(long)]
        epoch: Option<u64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    /// Labeled training tiles at the configured budget.
    Labeled,
    /// Unlabeled training tiles at the configured budget.
    Unlabeled,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
