//! Single entry point for the distillation pipeline: label generation, both
//! distillation stages, fine-tuning, evaluation, resource accounting,
//! gradient checking, and streaming inference.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error. Every
//! run with file outputs writes a resolved manifest next to them.

mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rigdistill", version, about = "Knowledge-distilled real-time speech-to-rig models")]
pub(crate) struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
pub(crate) enum Cmd {
    /// Generate pseudo-labels for a wav corpus with the synthetic teacher.
    Pseudolabel {
        /// Directory of 16 kHz mono wav files.
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output label file (.rdlb).
        #[arg(long)]
        out: PathBuf,
    },
    /// First-stage distillation against pseudo-labels.
    Distill {
        #[arg(long)]
        labels: PathBuf,
        /// Corpus root the label file's track paths resolve against.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long = "future-ms")]
        future_ms: Option<u32>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output checkpoint (.rdck); the metrics CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Second-stage distillation with feature supervision from a frozen
    /// intermediate teacher.
    Hybrid {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen intermediate teacher checkpoint.
        #[arg(long)]
        s0: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long = "future-ms")]
        future_ms: Option<u32>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint at a low rate with fresh Adam state.
    Finetune {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: MSE, lip-closure accuracy, jitter, resources,
    /// latency.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Directory of per-track phoneme interval files (<stem>.tsv).
        #[arg(long)]
        intervals: PathBuf,
        /// Lip geometry JSON.
        #[arg(long)]
        geometry: PathBuf,
        /// Lip-closure distance threshold.
        #[arg(long, default_value_t = 0.15)]
        threshold: f64,
        #[arg(long = "tolerance-frames", default_value_t = 2)]
        tolerance_frames: usize,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic parameter/MAC/memory accounting for a configuration.
    Account {
        #[arg(long, default_value_t = 256)]
        channels: usize,
        #[arg(long = "future-ms", default_value_t = 256)]
        future_ms: u32,
        /// Optionally write the report to a file (else stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference validation of every operator and a full network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channel width of the whole-network check.
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Number of random seeds for the per-operator sweep.
        #[arg(long, default_value_t = 100)]
        rounds: u64,
    },
    /// Stream raw 16-bit little-endian PCM from stdin to rig CSV on stdout.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// "plain" or "ensemble".
        #[arg(long, default_value = "plain")]
        mode: String,
        /// Ensemble weights a,b,c (defaults to thirds in ensemble mode).
        #[arg(long)]
        alphas: Option<String>,
    },
}

fn main() -> ExitCode {
    rigdistill::init_threads_from_env();
    let cli = Cli::parse();
    match run::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(run::CliError::Validation(msg)) => {
            eprintln!("error: validation: {msg}");
            ExitCode::from(1)
        }
        Err(run::CliError::Runtime(msg)) => {
            eprintln!("error: runtime: {msg}");
            ExitCode::from(2)
        }
    }
}
