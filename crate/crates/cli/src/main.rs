//! `rwgcn`: classify, benchmark, corrupt and train from the command line.
//!
//! Exit codes: 0 on success, 1 when a check fails or training diverges,
//! 2 on configuration errors, 3 on data errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rwgcn_core::io::{load_config, FileConfig};
use rwgcn_core::{Error, Variant};

#[derive(Parser, Debug)]
#[command(name = "rwgcn", version, about = "Windowed skeleton action recognition")]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stream clips through a checkpoint and print one JSON event per window.
    Classify(ClassifyArgs),
    /// Measure throughput and print a CSV summary.
    Bench(BenchArgs),
    /// Corrupt clips with keypoint and frame noise.
    Noise(NoiseArgs),
    /// Train on the synthetic two-class set.
    TrainToy(TrainToyArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the trainable parameter count per layer.
    Params(ParamsArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct WindowFlags {
    /// Frames per clip; clips are repeat-padded or truncated to this.
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// Frames per window.
    #[arg(long)]
    pub window_len: Option<usize>,
    /// Input frame rate.
    #[arg(long)]
    pub fps_in: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct NoiseFlags {
    #[arg(long)]
    pub spatial_drop_p: Option<f64>,
    #[arg(long)]
    pub frame_drop_p: Option<f64>,
    #[arg(long)]
    pub id_confusion_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Clip document (`.json`), clip stream (`.jsonl`) or `-` for a stream on stdin.
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feedback mode; defaults to the checkpoint's variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Person slots per clip.
    #[arg(long, default_value_t = 2)]
    pub people: usize,
    #[command(flatten)]
    pub window: WindowFlags,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Network to time; without one a freshly initialized standard network is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Classes of the fresh network.
    #[arg(long, default_value_t = 120)]
    pub classes: usize,
    /// Feedback mode; a fresh network is grown to match.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 1)]
    pub people: usize,
    /// Seconds to measure for.
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    #[command(flatten)]
    pub window: WindowFlags,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// Clip document, clip stream or `-` for a stream on stdin.
    pub input: PathBuf,
    /// Output stream; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub people: usize,
    #[command(flatten)]
    pub noise: NoiseFlags,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Where to write the trained network.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch CSV; standard output when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Epoch at which feedback blocks are attached.
    #[arg(long)]
    pub grow_epoch: Option<usize>,
    /// Variant attached at the grow epoch.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Stop gradients through the feedback vector between windows.
    #[arg(long)]
    pub detach_feedback: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub classes: usize,
    /// Count a fresh network grown to this variant.
    #[arg(long)]
    pub variant: Option<Variant>,
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Domain(_) | Error::State(_) => 2,
                Error::Dimension(_) | Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
                Error::Oracle(_) | Error::Divergence { .. } => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Check(msg) => f.write_str(msg),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Classify(a) => commands::classify(&a, &file),
        Command::Bench(a) => commands::bench(&a, &file),
        Command::Noise(a) => commands::noise(&a, &file),
        Command::TrainToy(a) => commands::train_toy(&a, &file),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Params(a) => commands::params(&a, &file),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
