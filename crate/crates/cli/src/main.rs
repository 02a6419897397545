//! `matchtensor`: generate synthetic corpora, train and evaluate rankers,
//! and compare runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use matchtensor::io::{Split, TaskKind};
use matchtensor::{Architecture, EncoderKind};

#[derive(Debug, Parser)]
#[command(name = "matchtensor", version, about = "Neural relevance ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (data.tsv, embeddings.vec).
    Generate {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and save its manifest.
    Train(ModelArgs),
    /// Score a dataset with a saved manifest, BM25 or an untrained model.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, conflicts_with_all = ["bm25", "arch"])]
        manifest: Option<PathBuf>,
        /// Evaluate the BM25 baseline.
        #[arg(long, conflicts_with = "arch")]
        bm25: bool,
        /// Evaluate a freshly initialised model of this architecture.
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long, default_value = "bilstm")]
        encoder: EncoderKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print percent metric deltas of a candidate run over a baseline run.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Rescore both runs on this dataset instead of using stored metrics.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random hyperparameter search; retrains and saves the best trial.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 8)]
        runs: usize,
    },
    /// Retrain on query subsamples of the training split.
    SizeSweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.25, 0.5, 1.0])]
        fractions: Vec<f64>,
    },
    /// Boosted trees over a saved model's score and BM25.
    Ensemble {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Triplet file, or a directory holding data.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Embedding file; defaults to embeddings.vec next to the data.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    arch: Architecture,
    #[arg(long, default_value = "bilstm")]
    encoder: EncoderKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let body = rendered.split("\n\n").next().unwrap_or("usage error");
            eprintln!("{}", body.split_whitespace().collect::<Vec<_>>().join(" "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
