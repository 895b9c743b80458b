//! `spliceradar`: corpus synthesis, training, localisation, evaluation,
//! step sweeps and self-verification from one executable.

mod commands;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "spliceradar",
    version,
    about = "Blind splice localisation from camera-model features"
)]
struct Cli {
    /// Worker threads for every parallel section; 1 gives bit-reproducible output.
    #[arg(long, global = true, env = "SR_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic camera-model corpus.
    Synth(SynthArgs),
    /// Generate spliced test images and ground-truth masks.
    Splice(SpliceArgs),
    /// Train the camera-model classifier.
    Train(TrainArgs),
    /// Produce a tamper heat map for one image.
    Localize(LocalizeArgs),
    /// Localise a directory of images and score the maps against masks.
    Evaluate(EvaluateArgs),
    /// Evaluate over several patch steps, one table row per step.
    Sweep(SweepArgs),
    /// Run the built-in gradient, MI, EM and metric checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub models: usize,
    #[arg(long, default_value_t = 200)]
    pub images_per_model: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.002)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.001)]
    pub test_fraction: f64,
    /// Directory of PNG scenes to use instead of procedural content.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SpliceArgs {
    /// Corpus whose camera models supply host and donor images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory containing corpus.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override `key=value`, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SegmentArgs {
    #[arg(long, default_value_t = 100)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// opening, closing or none.
    #[arg(long, default_value = "opening")]
    pub morphology: String,
    /// Fit the mixture on raw rather than z-scored features.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub step: usize,
    /// Output heat map (PNG).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw SRMAP1 map here.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "maps")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "maps")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub step: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Score existing maps from this directory instead of running the model.
    #[arg(long, conflicts_with_all = ["model", "images"])]
    pub maps: Option<PathBuf>,
    /// per-image or global.
    #[arg(long, default_value = "per-image")]
    pub threshold_mode: String,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "24,36,48,60,72")]
    pub steps: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "per-image")]
    pub threshold_mode: String,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Deliberately corrupt one primitive's gradient to exercise the checks.
    #[arg(long, hide = true)]
    pub inject_bug: Option<String>,
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        log::error!("could not start worker pool: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, workers),
        Command::Splice(a) => commands::splice(&a, workers),
        Command::Train(a) => commands::train(&a, workers),
        Command::Localize(a) => commands::localize(&a, workers),
        Command::Evaluate(a) => commands::evaluate(&a, workers),
        Command::Sweep(a) => commands::sweep(&a, workers),
        Command::Verify(a) => commands::verify(&a, workers),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
