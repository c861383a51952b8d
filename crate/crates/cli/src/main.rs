//! `outpro` command-line tool.

mod bundle;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use outpro::anomgen::AnomalyMode;
use outpro::outpro::MetricKind;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "outpro",
    version,
    about = "Model-aware out-of-distribution detection for tabular regression"
)]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "OUTPRO_JOBS")]
    jobs: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit forest, signal set and calibration on a training CSV and write a bundle.
    Fit(FitArgs),
    /// Score a CSV with a fitted bundle.
    Score(ScoreArgs),
    /// Generate labeled anomalies from a dataset or a bundle's training data.
    GenAnomalies(GenArgs),
    /// Replicated Friedman benchmark with shift anomalies.
    BenchFriedman(BenchFriedmanArgs),
    /// Replicated copula-anomaly benchmark on a CSV dataset.
    BenchDataset(BenchDatasetArgs),
    /// Rebuild aggregate and rank tables from a results.csv.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Bundle to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Neighborhood size K.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub metric: Option<MetricKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ntree: Option<usize>,
    /// Seed for the forest and the importance step.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV holding at least the bundle's feature columns.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Source dataset CSV.
    #[arg(long, conflicts_with = "model")]
    pub data: Option<PathBuf>,
    /// Use the training data embedded in a bundle instead.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long)]
    pub mode: Option<AnomalyMode>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Comma-separated feature names to shift.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV; metadata goes next to it as `<out>.meta.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchFriedmanArgs {
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated shift magnitudes.
    #[arg(long, value_delimiter = ',')]
    pub shifts: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchDatasetArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Dataset label in the report; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Comma-separated copula modes.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<AnomalyMode>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A results.csv written by one of the bench commands.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    if let Some(jobs) = cfg.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => commands::fit(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::GenAnomalies(a) => commands::gen_anomalies(cfg, a),
        Command::BenchFriedman(a) => commands::bench_friedman(cfg, a),
        Command::BenchDataset(a) => commands::bench_dataset(cfg, a),
        Command::Report(a) => commands::report(a),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
