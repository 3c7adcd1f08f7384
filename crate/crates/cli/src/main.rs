//! `volnp`: the surface-construction pipeline as subcommands.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{digest_inputs, fresh_run_dir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "volnp", version, about = "Implied volatility surfaces from sparse option quotes")]
struct Cli {
    /// Experiment config file (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root under which a timestamped directory is created for this run.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,

    /// Write outputs to exactly this directory instead of a timestamped one.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Worker threads for per-day and per-task parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GeneratorArg {
    SsviRandom,
    SabrMixture,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Base,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum DaySet {
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct GenMarketArgs {
    /// Number of trading days.
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    generator: Option<GeneratorArg>,
    #[arg(long)]
    quotes_per_day: Option<usize>,
    /// Standard deviation of quote noise in basis points of vol.
    #[arg(long)]
    noise_bps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Quote CSV with columns date,expiry,strike,type,bid,ask,forward,discount_factor.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildPriorsArgs {
    /// Day bundle to calibrate.
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    /// SABR beta.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Day bundle (with SABR priors for the pretrain stage).
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    /// Checkpoint to start from (required for finetune).
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_tasks: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for task sampling (and initialisation of fresh models).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Calibrated baselines to include: sabr, ssvi, gp.
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    models: Vec<String>,
    /// Trained network as NAME=PATH (repeatable).
    #[arg(long = "checkpoint", value_name = "NAME=PATH")]
    checkpoints: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Day bundle to evaluate on.
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    /// Context quotes per day.
    #[arg(long)]
    n_context: Option<usize>,
    /// Seed of the per-day context draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on the held-out test days or on every day in the bundle.
    #[arg(long, value_enum, default_value = "test")]
    days: DaySet,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Context sizes, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    n_list: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Log-moneyness bin edges, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    k_edges: Vec<f64>,
    /// Maturity bin edges in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    tau_edges: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Network checkpoint; alternatively use --model.
    #[arg(long, value_name = "FILE", conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Calibrated baseline: sabr, ssvi or gp.
    #[arg(long)]
    model: Option<String>,
    /// Context quotes as k,tau,vol CSV.
    #[arg(long, value_name = "FILE")]
    context: PathBuf,
    /// Output grid, e.g. `k:-0.5:0.5:0.025 tau:0.1:2:0.1` (inclusive ends).
    #[arg(long, num_args = 2, value_names = ["K_SPEC", "TAU_SPEC"], allow_hyphen_values = true, required = true)]
    grid: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic market as a day bundle.
    GenMarket(GenMarketArgs),
    /// Split a quote CSV into a day bundle and report what the filters keep.
    Ingest(IngestArgs),
    /// Calibrate SABR per day and attach dense prior surfaces.
    BuildPriors(BuildPriorsArgs),
    /// Train one curriculum stage.
    Train(TrainArgs),
    /// Paired RMSE/MAE report at a fixed context size.
    Evaluate(EvalArgs),
    /// Evaluate at several context sizes with nested contexts.
    Sweep(SweepArgs),
    /// Per-cell RMSE over (k, tau) bins.
    Heatmap(HeatmapArgs),
    /// Durrleman butterfly diagnostics of fitted surfaces.
    ArbCheck(EvalArgs),
    /// Dense surface grid from one context file.
    Reconstruct(ReconstructArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenMarket(_) => "gen-market",
            Command::Ingest(_) => "ingest",
            Command::BuildPriors(_) => "build-priors",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Heatmap(_) => "heatmap",
            Command::ArbCheck(_) => "arb-check",
            Command::Reconstruct(_) => "reconstruct",
        }
    }
}

/// What a command read and wrote, for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// Effective configuration snapshot (TOML).
    pub config: String,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    let started = chrono::Local::now();
    let run_dir = match &cli.run_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|source| CliError::Io { path: d.clone(), source })?;
            d.clone()
        }
        None => fresh_run_dir(&cli.out, cli.command.name(), &started.format("%Y%m%d-%H%M%S").to_string())?,
    };
    let mut manifest = RunManifest {
        command: cli.command.name().to_string(),
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started.to_rfc3339(),
        seed: None,
        config: file_cfg.to_toml(),
        inputs: Vec::new(),
        inputs_sha256: String::new(),
        outputs: Vec::new(),
        wall_time_s: 0.0,
        status: "ok".into(),
    };
    let clock = Instant::now();
    let result = attempt(&cli, &file_cfg, &run_dir, &mut manifest);
    manifest.wall_time_s = clock.elapsed().as_secs_f64();
    match result {
        Ok(outcome) => {
            manifest.seed = outcome.seed;
            manifest.outputs = outcome.outputs;
            if !outcome.config.is_empty() {
                manifest.config = outcome.config;
            }
            manifest.write(&run_dir)?;
            println!("run directory: {}", run_dir.display());
            Ok(())
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            manifest.write(&run_dir)?;
            Err(e)
        }
    }
}

fn attempt(cli: &Cli, file_cfg: &FileConfig, run_dir: &std::path::Path, manifest: &mut RunManifest) -> CliResult<Outcome> {
    let mut inputs = commands::inputs(&cli.command)?;
    if let Some(c) = &cli.config {
        inputs.insert(0, c.clone());
    }
    for p in &inputs {
        if !p.exists() {
            return Err(CliError::config(format!("input path {} does not exist", p.display())));
        }
    }
    (manifest.inputs, manifest.inputs_sha256) = digest_inputs(&inputs)?;
    commands::execute(&cli.command, file_cfg, run_dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
