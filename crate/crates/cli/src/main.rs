//! `aimd`: command-line driver for dataset building, training and
//! evaluation of decoder-fingerprint detectors.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "aimd",
    version,
    about = "Detect AI-generated music through decoder fingerprints"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory of run folders; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel matrix rows.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the corpus and reconstruct it with every configured decoder.
    BuildDataset(BuildArgs),
    /// Train toy codecs on the training split of the corpus.
    TrainCodec(CodecArgs),
    /// Reconstruct a manifest's tracks (or one file) with the decoders.
    Reconstruct(ReconstructArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate a detector checkpoint.
    Eval(EvalArgs),
    /// Evaluate a detector under audio manipulations.
    Robustness(EvalArgs),
    /// Train one detector per decoder and cross-evaluate.
    Genmatrix(MatrixArgs),
    /// Score sliding windows of one audio file.
    Detect(DetectArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Continue an interrupted run inside this run directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    /// Compression levels to train (default: all three).
    #[arg(long, value_delimiter = ',')]
    pub level: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, conflicts_with = "audio")]
    pub manifest: Option<PathBuf>,
    /// Reconstruct a single WAV file instead of a manifest.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Restrict to these decoder ids.
    #[arg(long, value_delimiter = ',')]
    pub decoder: Vec<String>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides `train.representation`.
    #[arg(long)]
    pub representation: Option<String>,
    /// Overrides `train.decoder_ids`.
    #[arg(long, value_delimiter = ',')]
    pub decoders: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides `eval.split`.
    #[arg(long)]
    pub split: Option<String>,
    /// Overrides `eval.n_snippets`.
    #[arg(long)]
    pub snippets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Matrix decoders (default: all in the manifest).
    #[arg(long, value_delimiter = ',')]
    pub decoders: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub snippets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    /// Window stride in seconds; overrides `detect.stride_seconds`.
    #[arg(long)]
    pub stride: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage: {}", line.trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", run::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
