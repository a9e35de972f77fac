mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnas_core::Error;

#[derive(Parser)]
#[command(name = "dnas", version, about = "Latency-aware differentiable architecture search")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark every operator of a search space into a latency table.
    BenchLut(BenchLutArgs),
    /// Train the supernet and its architecture distribution.
    Search(SearchArgs),
    /// Draw architectures from a trained distribution.
    Sample(SampleArgs),
    /// Train one architecture from scratch and report its metrics.
    Train(TrainArgs),
    /// Predict an architecture's latency from a latency table.
    Predict(PredictArgs),
    /// Summarize a search run's per-epoch metrics.
    Report(ReportArgs),
    /// Compare table predictions against end-to-end timings.
    Additivity(AdditivityArgs),
    /// Write a synthetic dataset in the binary record format.
    SynthData(SynthDataArgs),
}

#[derive(Args)]
pub struct BenchLutArgs {
    /// Space config JSON, or a bundled name (`desk`, `imagenet`).
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = dnas_core::latency::DEFAULT_REPEATS)]
    pub repeats: usize,
    #[arg(long, default_value_t = dnas_core::latency::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value = "host-cpu")]
    pub device_label: String,
    /// Also export the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossModeArg {
    Multiplicative,
    Additive,
    LatencyOnly,
}

#[derive(Args)]
pub struct DataArgs {
    /// Binary dataset path, or `synth` for the built-in generator.
    #[arg(long)]
    pub data: String,
    /// Records per class for `--data synth`.
    #[arg(long, default_value_t = 100)]
    pub synth_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub lut: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file overriding search hyper-parameters.
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub postpone: Option<usize>,
    #[arg(long)]
    pub theta_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossModeArg>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub theta: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the space recorded next to the checkpoint.
    #[arg(long)]
    pub space: Option<String>,
    /// Defaults to the table recorded next to the checkpoint.
    #[arg(long)]
    pub lut: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub arch: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Table for the predicted-latency column.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub arch: PathBuf,
    /// Write the breakdown as CSV (`layer,kind,latency_us`).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct AdditivityArgs {
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthDataArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } | Error::Parse { .. } => 3,
        Error::Divergence(_) => 4,
        Error::Config(_)
        | Error::Input(_)
        | Error::InvalidArch(_)
        | Error::MissingLatency(_)
        | Error::Domain(_) => 2,
    }
}

/// Caps kernel parallelism from `DNAS_THREADS`.
fn init_threads() {
    if let Some(n) = std::env::var("DNAS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    init_threads();
    let result = match cli.command {
        Command::BenchLut(a) => commands::bench_lut(a),
        Command::Search(a) => commands::search(a),
        Command::Sample(a) => commands::sample(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Report(a) => commands::report(a),
        Command::Additivity(a) => commands::additivity(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
