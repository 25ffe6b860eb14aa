//! `crlab` — generate benchmarks, train, tune λ, sweep method matrices and
//! emit plot data.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 sweep finished with failed cells.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crlab::cld_gen::BenchmarkConfig;
use crlab::experiment::{self, SweepSpec};
use crlab::trainer::{self, TrainConfig, DEFAULT_LAMBDA_GRID};
use crlab::{json, LabError, Result};

#[derive(Parser)]
#[command(name = "crlab", version, about = "Consistency-regularization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (takes precedence over LAB_SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing files whose content differs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a SpurCorr benchmark (family, domains and manifest).
    Gen {
        /// Benchmark config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its record files.
    Run {
        /// Benchmark directory written by `gen`.
        #[arg(long)]
        benchmark: PathBuf,
        /// Training config JSON.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Tune λ on the validation domain and write every candidate run.
    Tune {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated λ grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every cell × seed of a sweep spec and summarize.
    Sweep {
        /// Sweep spec JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the spec's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum number of concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run only this seed (takes precedence over LAB_SEED).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Emit plot-ready CSVs for every run under a directory.
    Report {
        /// Run or sweep directory.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Gen { config, common } => gen(config.as_deref(), &common),
        Command::Run {
            benchmark,
            config,
            common,
        } => run(&benchmark, &config, &common),
        Command::Tune {
            benchmark,
            config,
            grid,
            common,
        } => tune(&benchmark, &config, grid.as_deref(), &common),
        Command::Sweep {
            config,
            out,
            jobs,
            seed,
            force,
        } => sweep(&config, out, jobs, seed, force),
        Command::Report { input, out, force } => report(&input, &out, force),
    }
}

fn gen(config: Option<&Path>, common: &Common) -> Result<u8> {
    let mut cfg: BenchmarkConfig = match config {
        Some(path) => json::read_file(path)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(seed) = experiment::seed_override(common.seed)? {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| LabError::config(e.to_string()))?;
    let manifest = experiment::generate_benchmark(&cfg, &common.out, common.force)?;
    info!(
        "benchmark {} (seed {}, support_ok {}) written to {}",
        manifest.benchmark_id,
        manifest.seed,
        manifest.support_ok,
        common.out.display()
    );
    println!("{}", common.out.display());
    Ok(0)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let (mut config, warnings) = experiment::load_train_config(path)?;
    for w in warnings {
        warn!("{w}");
    }
    if let Some(seed) = experiment::seed_override(seed)? {
        config.seed = seed;
    }
    Ok(config)
}

fn run(benchmark: &Path, config: &Path, common: &Common) -> Result<u8> {
    let (b, manifest) = experiment::load_benchmark(benchmark)?;
    let config = load_config(config, common.seed)?;
    let output = trainer::train(&b.family, &b.source, &b.validation, &b.target, &config)?;
    let dir = experiment::save_run(&common.out, &manifest.benchmark_id, &output, common.force)?;
    let s = &output.record.summary;
    info!(
        "{} seed {}: ood_acc {:.4}, ood_ce {:.4}, regret {:.4}",
        config.method, config.seed, s.ood.accuracy, s.ood.cross_entropy, s.ood.regret
    );
    println!("{}", dir.display());
    Ok(0)
}

fn tune(benchmark: &Path, config: &Path, grid: Option<&[f64]>, common: &Common) -> Result<u8> {
    let (b, manifest) = experiment::load_benchmark(benchmark)?;
    let config = load_config(config, common.seed)?;
    let grid = grid.unwrap_or(&DEFAULT_LAMBDA_GRID);
    let tuned = trainer::tune_lambda(&b.family, &b.source, &b.validation, &b.target, &config, grid)?;
    for entry in &tuned.entries {
        let dir = experiment::save_run(&common.out, &manifest.benchmark_id, &entry.output, common.force)?;
        let s = &entry.output.record.summary;
        info!(
            "lambda {}: validation acc {:.4}, ood acc {:.4} -> {}",
            entry.lambda,
            s.validation.accuracy,
            s.ood.accuracy,
            dir.display()
        );
    }
    println!("{}", tuned.best_lambda);
    Ok(0)
}

fn sweep(path: &Path, out: Option<PathBuf>, jobs: usize, seed: Option<u64>, force: bool) -> Result<u8> {
    let mut spec = SweepSpec::load(path)?;
    if let Some(out) = out {
        spec.out = out;
    }
    if let Some(seed) = experiment::seed_override(seed)? {
        spec.seeds = vec![seed];
    }
    let outcome = experiment::run_sweep(&spec, jobs, force)?;
    let failed: Vec<_> = outcome.failures().collect();
    for f in &failed {
        warn!(
            "cell {} seed {} failed: {}",
            f.cell,
            f.seed,
            f.error.as_deref().unwrap_or("")
        );
    }
    println!("{}", spec.out.join(experiment::SUMMARY_MD).display());
    Ok(if failed.is_empty() { 0 } else { 3 })
}

fn report(input: &Path, out: &Path, force: bool) -> Result<u8> {
    let files = experiment::write_report(input, out, force)?;
    info!(
        "{} learning curves, {} histograms, {} fidelity and {} pair-fraction series",
        files.curves.len(),
        files.histograms.len(),
        files.fidelity_series.len(),
        files.fraction_series.len()
    );
    println!("{}", out.display());
    Ok(0)
}
