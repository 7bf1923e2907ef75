//! `echodiff`: data preparation, training, sampling and evaluation for
//! semantic-map-conditioned echocardiography video diffusion.
//!
//! Exit codes: 0 success, 1 invalid configuration or inputs, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echodiff_core::trainer::ModelVariant;
use echodiff_core::ConditionMode;

use config::ExtractorKind;

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or inputs; every problem found is listed.
    Invalid(Vec<String>),
    Runtime(String),
}

impl From<echodiff_core::Error> for Failure {
    fn from(e: echodiff_core::Error) -> Self {
        match e {
            echodiff_core::Error::Validation(v) => Failure::Invalid(v),
            e if e.is_validation() => Failure::Invalid(vec![e.to_string()]),
            e => Failure::Runtime(error_chain(&e)),
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(c) = cur {
        let m = c.to_string();
        if !s.contains(&m) {
            s.push_str(": ");
            s.push_str(&m);
        }
        cur = c.source();
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "echodiff", version = env!("CARGO_PKG_VERSION"), about, long_about = None)]
struct Cli {
    /// Log filter, e.g. `info`, `debug` or `echodiff_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-chamber dataset.
    MakeToyData(MakeToyArgs),
    /// Convert CAMUS MetaImage exports into the dataset layout.
    ConvertCamus(ConvertArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Generate clips for a label map.
    Sample(SampleArgs),
    /// Sample for held-out maps and report FID, FVD and SSIM.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeToyArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patients: Option<usize>,
    /// Frames per patient (ED to ES).
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame size in pixels (a multiple of 8).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory holding one sub-directory per CAMUS patient.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Square output size in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<ModelVariant>,
    #[arg(long, value_parser = parse_mode)]
    condition_mode: Option<ConditionMode>,
    /// Frames per training clip `K` (16 or 24 in the reference setup).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    /// Diffusion steps `T`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Trained checkpoint (the base stage with `--cascade`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Super-resolution checkpoint for `--cascade`.
    #[arg(long)]
    sr_checkpoint: Option<PathBuf>,
    /// Label map image; pixel values are class ids.
    #[arg(long)]
    label_map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clips to generate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classifier-free guidance scale `s` [default: 7.0].
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Two-stage sampling: base stage, then super-resolution.
    #[arg(long)]
    cascade: bool,
    /// Use the raw weights even when averaged weights are stored.
    #[arg(long)]
    raw_weights: bool,
    /// Skip the animated preview.
    #[arg(long)]
    no_preview: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sr_checkpoint: Option<PathBuf>,
    #[arg(long)]
    cascade: bool,
    /// Dataset root; maps come from the configured split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_per_map: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long, value_enum)]
    extractor: Option<ExtractorKind>,
    /// test | val | train | all
    #[arg(long)]
    split: Option<String>,
    /// Evaluate only the first this many maps.
    #[arg(long)]
    max_maps: Option<usize>,
    /// Also write every generated clip under `<out>/videos`.
    #[arg(long)]
    save_videos: bool,
    #[arg(long)]
    raw_weights: bool,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: echodiff_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ConditionMode, String> {
    s.parse().map_err(|e: echodiff_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    let result = match cli.command {
        Command::MakeToyData(a) => commands::make_toy_data(a),
        Command::ConvertCamus(a) => commands::convert_camus(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(problems)) => {
            eprintln!("error: invalid configuration or input");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
