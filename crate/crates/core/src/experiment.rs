//! Experiment plumbing: benchmark files, the run record store, method-matrix
//! sweeps and plot-ready reports.
//!
//! Layout under an output directory:
//!
//! ```text
//! runs/<benchmark id>/<config hash>/seed-<seed>/{metrics.csv, config.json, record.json, params.json}
//! summary.csv  summary.json  summary.md  results.json      (sweeps only)
//! ```
//!
//! Every path is a pure function of (benchmark id, config hash, seed). Files
//! are written atomically (temp file + rename) and an existing file is only
//! replaced when its content is identical or `force` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cld_gen::{self, Benchmark, BenchmarkConfig, DomainSpec, FamilySpec};
use crate::error::{LabError, Result};
use crate::json;
use crate::model::ModelParams;
use crate::rng::{stream_rng, Stream};
use crate::trainer::{self, EpochRow, Method, RunOutput, RunRecord, TrainConfig, CSV_COLUMNS};

/// Environment variable that overrides the seed of any config.
pub const SEED_ENV: &str = "LAB_SEED";

/// Resolves the effective seed override: an explicit flag wins over
/// `LAB_SEED`; `None` keeps the config's own seed.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

// ---------------------------------------------------------------------------
// file helpers

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What [`write_checked`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Created,
    Unchanged,
    Replaced,
}

/// Atomically writes `contents` to `path`. An existing file with a different
/// content hash is a [`LabError::Conflict`] unless `force` is set.
pub fn write_checked(path: &Path, contents: &[u8], force: bool) -> Result<WriteOutcome> {
    let outcome = match fs::read(path) {
        Ok(existing) if sha256_hex(&existing) == sha256_hex(contents) => return Ok(WriteOutcome::Unchanged),
        Ok(_) if !force => return Err(LabError::Conflict(path.to_path_buf())),
        Ok(_) => WriteOutcome::Replaced,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => WriteOutcome::Created,
        Err(e) => return Err(LabError::io(path, e)),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))?;
    Ok(outcome)
}

/// Formats a real with 10 significant digits, like C's `%.10g`.
pub fn format_real(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.9e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..10).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (9 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| LabError::internal(e.to_string()))
}

// ---------------------------------------------------------------------------
// benchmarks

pub const FAMILY_FILE: &str = "family.json";
pub const SOURCE_FILE: &str = "source.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const TARGET_FILE: &str = "target.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub benchmark_id: String,
    pub seed: u64,
    pub support_ok: bool,
    pub config: BenchmarkConfig,
}

/// Identifier of a benchmark: a short hash over its four spec files.
pub fn benchmark_id(b: &Benchmark) -> Result<String> {
    let mut hasher = Sha256::new();
    for text in benchmark_texts(b)? {
        hasher.update(text.as_bytes());
    }
    Ok(hex::encode(hasher.finalize())[..16].to_string())
}

fn benchmark_texts(b: &Benchmark) -> Result<[String; 4]> {
    Ok([
        json::to_string(&b.family)?,
        json::to_string(&b.source)?,
        json::to_string(&b.validation)?,
        json::to_string(&b.target)?,
    ])
}

/// Generates the benchmark described by `config` into `dir`.
pub fn generate_benchmark(config: &BenchmarkConfig, dir: &Path, force: bool) -> Result<Manifest> {
    let b = cld_gen::make_spurcorr_family(config, &mut stream_rng(config.seed, Stream::Family))?;
    let manifest = Manifest {
        benchmark_id: benchmark_id(&b)?,
        seed: config.seed,
        support_ok: cld_gen::check_support_condition(&b.source, &b.target),
        config: config.clone(),
    };
    let texts = benchmark_texts(&b)?;
    for (name, text) in [FAMILY_FILE, SOURCE_FILE, VALIDATION_FILE, TARGET_FILE].iter().zip(&texts) {
        write_checked(&dir.join(name), text.as_bytes(), force)?;
    }
    write_checked(&dir.join(MANIFEST_FILE), json::to_string(&manifest)?.as_bytes(), force)?;
    Ok(manifest)
}

/// Reads a benchmark directory written by [`generate_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<(Benchmark, Manifest)> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| LabError::io(path, e))
    };
    let parse_err = |name: &str, e: LabError| LabError::config(format!("{}: {e}", dir.join(name).display()));
    let family: FamilySpec = json::from_str(&read(FAMILY_FILE)?).map_err(|e| parse_err(FAMILY_FILE, e))?;
    let domain = |name: &str| -> Result<DomainSpec> { json::from_str(&read(name)?).map_err(|e| parse_err(name, e)) };
    let b = Benchmark {
        source: domain(SOURCE_FILE)?,
        validation: domain(VALIDATION_FILE)?,
        target: domain(TARGET_FILE)?,
        family,
    };
    let manifest: Manifest = json::from_str(&read(MANIFEST_FILE)?).map_err(|e| parse_err(MANIFEST_FILE, e))?;
    b.family.validate()?;
    for d in [&b.source, &b.validation, &b.target] {
        b.family.check_domain(d)?;
    }
    Ok((b, manifest))
}

// ---------------------------------------------------------------------------
// configs

/// Reads a training config, returning advisory warnings alongside it.
pub fn load_train_config(path: &Path) -> Result<(TrainConfig, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_train_config(&text).map_err(|e| match e {
        LabError::Json(j) => LabError::config(format!("{}: {j}", path.display())),
        other => other,
    })
}

pub fn parse_train_config(text: &str) -> Result<(TrainConfig, Vec<String>)> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let config: TrainConfig = serde_json::from_value(raw.clone())?;
    config.validate()?;
    let mut warnings = Vec::new();
    // λ only weights a consistency penalty; erm and erm_da have none
    if raw.get("lambda").is_some() && !matches!(config.method, Method::Cr(_)) {
        warnings.push(format!("lambda is ignored for method {}", config.method));
    }
    Ok((config, warnings))
}

/// Hash of a config with its seed cleared, so that runs differing only by
/// seed share a config directory.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let normalized = TrainConfig {
        seed: 0,
        ..config.clone()
    };
    Ok(sha256_hex(json::to_string(&normalized)?.as_bytes())[..16].to_string())
}

// ---------------------------------------------------------------------------
// run records

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RECORD_FILE: &str = "record.json";
pub const PARAMS_FILE: &str = "params.json";

pub fn run_dir(out: &Path, benchmark_id: &str, config: &TrainConfig) -> Result<PathBuf> {
    Ok(out
        .join("runs")
        .join(benchmark_id)
        .join(config_hash(config)?)
        .join(format!("seed-{}", config.seed)))
}

/// Learning curve as CSV: header row, LF endings, reals at 10 digits.
pub fn metrics_csv(rows: &[EpochRow]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        let mut fields = vec![r.epoch.to_string()];
        fields.extend(
            [
                r.train_ce,
                r.id_ce,
                r.id_acc,
                r.ood_ce,
                r.ood_acc,
                r.ood_macro_f1,
                r.invariance_score,
                r.regret,
            ]
            .map(format_real),
        );
        w.write_record(&fields)?;
    }
    finish_csv(w)
}

/// Persists one run; returns its directory.
pub fn save_run(out: &Path, benchmark_id: &str, output: &RunOutput, force: bool) -> Result<PathBuf> {
    let record = &output.record;
    let dir = run_dir(out, benchmark_id, &record.config)?;
    write_checked(&dir.join(METRICS_FILE), &metrics_csv(&record.rows)?, force)?;
    write_checked(&dir.join(CONFIG_FILE), json::to_string(&record.config)?.as_bytes(), force)?;
    write_checked(&dir.join(RECORD_FILE), json::to_string(record)?.as_bytes(), force)?;
    write_checked(&dir.join(PARAMS_FILE), json::to_string(&output.params)?.as_bytes(), force)?;
    Ok(dir)
}

pub fn load_record(run_dir: &Path) -> Result<RunRecord> {
    json::read_file(&run_dir.join(RECORD_FILE))
}

pub fn load_params(run_dir: &Path) -> Result<ModelParams> {
    json::read_file(&run_dir.join(PARAMS_FILE))
}

// ---------------------------------------------------------------------------
// sweeps

/// One row of the method matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub method: Method,
    /// Candidate λ values. Several are tuned on the validation domain; one is
    /// used as is; none falls back to the base config's λ.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "one")]
    pub fidelity: f64,
    #[serde(default = "one")]
    pub pair_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub cells: Vec<SweepCell>,
    pub seeds: Vec<u64>,
    /// Benchmark directory; relative paths resolve against the spec file.
    pub benchmark: PathBuf,
    /// Output directory; relative paths resolve against the spec file.
    pub out: PathBuf,
    /// Settings shared by every cell (method, λ, fidelity, fraction and seed
    /// are overridden per job).
    #[serde(default)]
    pub base: TrainConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(LabError::config("sweep needs at least one cell"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::config("sweep needs at least one seed"));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(LabError::config(format!("cell {i}: lambda values must be finite and nonnegative")));
            }
            self.job_config(cell, self.seeds[0], self.base.lambda)
                .validate()
                .map_err(|e| LabError::config(format!("cell {i}: {e}")))?;
        }
        Ok(())
    }

    /// Reads a spec file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<SweepSpec> {
        let mut spec: SweepSpec = json::read_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if spec.benchmark.is_relative() {
            spec.benchmark = base.join(&spec.benchmark);
        }
        if spec.out.is_relative() {
            spec.out = base.join(&spec.out);
        }
        spec.validate()?;
        Ok(spec)
    }

    fn job_config(&self, cell: &SweepCell, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            method: cell.method,
            lambda,
            fidelity: cell.fidelity,
            pair_fraction: cell.pair_fraction,
            seed,
            ..self.base.clone()
        }
    }
}

/// Display label of a cell, e.g. `cr:lam f=0.5 p=1`.
pub fn cell_label(cell: &SweepCell) -> String {
    format!("{} f={} p={}", cell.method, cell.fidelity, cell.pair_fraction)
}

/// Result of one (cell, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub cell: usize,
    pub seed: u64,
    /// λ of the kept run (after tuning, when the grid has several values).
    pub lambda: Option<f64>,
    /// Kept run directory, relative to the sweep output directory.
    pub run: Option<PathBuf>,
    pub error: Option<String>,
}

/// Runs one job: tunes or trains, persists every trained run and returns the
/// kept one.
pub fn run_job(
    spec: &SweepSpec,
    bench: &Benchmark,
    bench_id: &str,
    cell: &SweepCell,
    seed: u64,
    force: bool,
) -> Result<(f64, PathBuf, RunRecord)> {
    let (family, source, validation, target) = (&bench.family, &bench.source, &bench.validation, &bench.target);
    let lambdas = if cell.method.uses_pairs() && !cell.lambda_grid.is_empty() {
        cell.lambda_grid.clone()
    } else {
        vec![spec.base.lambda]
    };
    let config = spec.job_config(cell, seed, lambdas[0]);
    let (lambda, kept, all) = if lambdas.len() > 1 {
        let tuned = trainer::tune_lambda(family, source, validation, target, &config, &lambdas)?;
        let kept = tuned.best().clone();
        let all: Vec<RunOutput> = tuned.entries.into_iter().map(|e| e.output).collect();
        (tuned.best_lambda, kept, all)
    } else {
        let out = trainer::train(family, source, validation, target, &config)?;
        (lambdas[0], out.clone(), vec![out])
    };
    for output in &all {
        save_run(&spec.out, bench_id, output, force)?;
    }
    let dir = save_run(&spec.out, bench_id, &kept, force)?;
    let rel = dir.strip_prefix(&spec.out).unwrap_or(&dir).to_path_buf();
    Ok((lambda, rel, kept.record))
}

/// Mean and sample (n − 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Aggregate of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let (mean, std) = mean_std(values);
        Stat { mean, std }
    }
}

/// Final metrics a summary row aggregates, in column order.
pub const SUMMARY_METRICS: [&str; 6] = ["ood_acc", "ood_macro_f1", "ood_ce", "regret", "invariance_score", "id_acc"];

pub fn final_metrics(record: &RunRecord) -> [f64; 6] {
    let s = &record.summary;
    [
        s.ood.accuracy,
        s.ood.macro_f1,
        s.ood.cross_entropy,
        s.ood.regret,
        s.ood.invariance_score.unwrap_or(f64::NAN),
        s.id.accuracy,
    ]
}

/// Change of a cell's mean OOD accuracy relative to the ERM+DA row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrow {
    Up,
    Down,
    Same,
    /// The reference row itself.
    Ref,
    /// No ERM+DA row to compare against, or no finished runs.
    None,
}

impl Arrow {
    pub fn as_str(self) -> &'static str {
        match self {
            Arrow::Up => "up",
            Arrow::Down => "down",
            Arrow::Same => "same",
            Arrow::Ref => "ref",
            Arrow::None => "n/a",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Arrow::Up => "↑",
            Arrow::Down => "↓",
            Arrow::Same => "=",
            Arrow::Ref => "--",
            Arrow::None => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub label: String,
    pub method: Method,
    pub fidelity: f64,
    pub pair_fraction: f64,
    pub seeds: Vec<u64>,
    pub failed: usize,
    pub lambdas: Vec<f64>,
    /// One entry per name in [`SUMMARY_METRICS`].
    pub stats: Vec<Stat>,
    pub arrow: Arrow,
}

impl SummaryRow {
    pub fn ood_acc(&self) -> Stat {
        self.stats[0]
    }
}

/// Index of the ERM+DA row compared against cell `i`: the one with the same
/// fidelity and fraction if present, else the first ERM+DA row.
fn reference_row(cells: &[SweepCell], i: usize) -> Option<usize> {
    let erm_da: Vec<usize> = (0..cells.len()).filter(|&j| cells[j].method == Method::ErmDa).collect();
    erm_da
        .iter()
        .copied()
        .find(|&j| cells[j].fidelity == cells[i].fidelity && cells[j].pair_fraction == cells[i].pair_fraction)
        .or_else(|| erm_da.first().copied())
}

/// Aggregates job results (with their kept records) into summary rows.
pub fn summarize(cells: &[SweepCell], jobs: &[(JobResult, Option<RunRecord>)]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let mine: Vec<&(JobResult, Option<RunRecord>)> = jobs.iter().filter(|(j, _)| j.cell == i).collect();
            let done: Vec<&RunRecord> = mine.iter().filter_map(|(_, r)| r.as_ref()).collect();
            let finals: Vec<[f64; 6]> = done.iter().map(|r| final_metrics(r)).collect();
            let stats = (0..SUMMARY_METRICS.len())
                .map(|k| Stat::of(&finals.iter().map(|f| f[k]).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                cell: i,
                label: cell_label(cell),
                method: cell.method,
                fidelity: cell.fidelity,
                pair_fraction: cell.pair_fraction,
                seeds: mine.iter().filter(|(_, r)| r.is_some()).map(|(j, _)| j.seed).collect(),
                failed: mine.iter().filter(|(j, _)| j.error.is_some()).count(),
                lambdas: mine.iter().filter_map(|(j, _)| j.lambda).collect(),
                stats,
                arrow: Arrow::None,
            }
        })
        .collect();
    let means: Vec<f64> = rows.iter().map(|r| r.ood_acc().mean).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.arrow = match reference_row(cells, i) {
            Some(j) if j == i => Arrow::Ref,
            Some(j) if means[i].is_nan() || means[j].is_nan() => Arrow::None,
            Some(j) if means[i] > means[j] => Arrow::Up,
            Some(j) if means[i] < means[j] => Arrow::Down,
            Some(_) => Arrow::Same,
            None => Arrow::None,
        };
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    let mut header: Vec<String> = ["cell", "label", "method", "fidelity", "pair_fraction", "n", "failed", "lambdas"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    header.push("vs_erm_da".into());
    w.write_record(&header)?;
    for r in rows {
        let mut f = vec![
            r.cell.to_string(),
            r.label.clone(),
            r.method.to_string(),
            format_real(r.fidelity),
            format_real(r.pair_fraction),
            r.seeds.len().to_string(),
            r.failed.to_string(),
            r.lambdas.iter().map(|&l| format_real(l)).collect::<Vec<_>>().join(";"),
        ];
        for s in &r.stats {
            f.push(format_real(s.mean));
            f.push(format_real(s.std));
        }
        f.push(r.arrow.as_str().into());
        w.write_record(&f)?;
    }
    finish_csv(w)
}

/// Markdown table in the layout of a method-comparison table: percentages as
/// mean ± std with an arrow against the ERM+DA row.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let pct = |s: Stat| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
    let mut out = String::from(
        "| Method | Fidelity | Pair fraction | λ | OOD acc (%) | OOD macro-F1 (%) | Regret (nats) | vs ERM+DA |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let lambdas: BTreeSet<String> = r.lambdas.iter().map(|&l| format_real(l)).collect();
        let lambda = if r.method.uses_pairs() {
            lambdas.into_iter().collect::<Vec<_>>().join(", ")
        } else {
            "-".into()
        };
        let regret = r.stats[3];
        out += &format!(
            "| {} | {} | {} | {} | {} {} | {} | {:.4} ± {:.4} | {} |\n",
            r.method,
            format_real(r.fidelity),
            format_real(r.pair_fraction),
            lambda,
            pct(r.ood_acc()),
            r.arrow.symbol(),
            pct(r.stats[1]),
            regret.mean,
            regret.std,
            r.arrow.as_str(),
        );
    }
    out
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_MD: &str = "summary.md";
pub const RESULTS_FILE: &str = "results.json";

/// Everything a sweep produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub benchmark_id: String,
    pub cells: Vec<SweepCell>,
    pub jobs: Vec<JobResult>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub results: SweepResults,
    pub summary: Vec<SummaryRow>,
}

impl SweepOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &JobResult> {
        self.results.jobs.iter().filter(|j| j.error.is_some())
    }
}

/// Runs every cell × seed (at most `jobs` at a time), then writes the
/// summary files. Job failures are recorded, not raised.
pub fn run_sweep(spec: &SweepSpec, jobs: usize, force: bool) -> Result<SweepOutcome> {
    spec.validate()?;
    let (bench, manifest) = load_benchmark(&spec.benchmark)?;
    let work: Vec<(usize, u64)> = (0..spec.cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LabError::internal(e.to_string()))?;
    let done: Vec<(JobResult, Option<RunRecord>)> = pool.install(|| {
        work.par_iter()
            .map(|&(c, seed)| {
                let cell = &spec.cells[c];
                match run_job(spec, &bench, &manifest.benchmark_id, cell, seed, force) {
                    Ok((lambda, run, record)) => {
                        log::info!("{} seed {seed}: ood_acc {:.4}", cell_label(cell), record.summary.ood.accuracy);
                        let job = JobResult {
                            cell: c,
                            seed,
                            lambda: Some(lambda),
                            run: Some(run),
                            error: None,
                        };
                        (job, Some(record))
                    }
                    Err(e) => {
                        log::error!("{} seed {seed}: {e}", cell_label(cell));
                        let job = JobResult {
                            cell: c,
                            seed,
                            lambda: None,
                            run: None,
                            error: Some(e.to_string()),
                        };
                        (job, None)
                    }
                }
            })
            .collect()
    });
    let summary = summarize(&spec.cells, &done);
    let results = SweepResults {
        benchmark_id: manifest.benchmark_id.clone(),
        cells: spec.cells.clone(),
        jobs: done.into_iter().map(|(j, _)| j).collect(),
    };
    write_checked(&spec.out.join(RESULTS_FILE), json::to_string(&results)?.as_bytes(), force)?;
    write_checked(&spec.out.join(SUMMARY_JSON), json::to_string(&summary)?.as_bytes(), force)?;
    write_checked(&spec.out.join(SUMMARY_CSV), &summary_csv(&summary)?, force)?;
    write_checked(&spec.out.join(SUMMARY_MD), summary_markdown(&summary).as_bytes(), force)?;
    Ok(SweepOutcome { results, summary })
}

/// Recomputes a sweep summary from the run files it points at.
pub fn resummarize(sweep_dir: &Path) -> Result<Vec<SummaryRow>> {
    let results: SweepResults = json::read_file(&sweep_dir.join(RESULTS_FILE))?;
    let mut jobs = Vec::with_capacity(results.jobs.len());
    for job in results.jobs {
        let record = match &job.run {
            Some(rel) => Some(load_record(&sweep_dir.join(rel))?),
            None => None,
        };
        jobs.push((job, record));
    }
    Ok(summarize(&results.cells, &jobs))
}

// ---------------------------------------------------------------------------
// reports

/// Every directory under `root` (inclusive) holding a run record, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(RECORD_FILE).is_file() {
            found.push(dir.clone());
        }
        let entries = fs::read_dir(&dir).map_err(|e| LabError::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| LabError::io(&dir, e))?;
            if entry.file_type().map_err(|e| LabError::io(entry.path(), e))?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

fn run_key(root: &Path, run: &Path) -> String {
    let rel = run.strip_prefix(root).unwrap_or(run);
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.is_empty() {
        "run".into()
    } else {
        parts.join("__")
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Files written by [`write_report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub curves: Vec<PathBuf>,
    pub histograms: Vec<PathBuf>,
    pub fidelity_series: Vec<PathBuf>,
    pub fraction_series: Vec<PathBuf>,
}

fn histogram_csv(record: &RunRecord) -> Result<Option<Vec<u8>>> {
    let Some(h) = &record.summary.ood.head_weight_histogram else {
        return Ok(None);
    };
    let mut w = csv_writer();
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (i, count) in h.counts.iter().enumerate() {
        w.write_record([format_real(h.bin_edges[i]), format_real(h.bin_edges[i + 1]), count.to_string()])?;
    }
    Ok(Some(finish_csv(w)?))
}

/// Ablation points, keyed by the varied knob's distinct values.
fn series_csv(points: &BTreeMap<u64, (f64, Vec<f64>)>, knob: &str) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record([knob, "n", "ood_acc_mean", "ood_acc_std", "ood_acc_median"])?;
    for (value, accs) in points.values() {
        let s = Stat::of(accs);
        w.write_record([
            format_real(*value),
            accs.len().to_string(),
            format_real(s.mean),
            format_real(s.std),
            format_real(median(accs)),
        ])?;
    }
    finish_csv(w)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Emits plot-ready CSVs for every run under `input` into `out`: one
/// learning curve and one head-weight histogram per run and, for sweeps,
/// fidelity and pair-fraction series per method.
pub fn write_report(input: &Path, out: &Path, force: bool) -> Result<ReportFiles> {
    let runs = find_runs(input)?;
    if runs.is_empty() {
        return Err(LabError::config(format!("no run records under {}", input.display())));
    }
    let mut files = ReportFiles::default();
    for run in &runs {
        let record = load_record(run)?;
        let key = run_key(input, run);
        let path = out.join("curves").join(format!("{key}.csv"));
        write_checked(&path, &metrics_csv(&record.rows)?, force)?;
        files.curves.push(path);
        if let Some(bytes) = histogram_csv(&record)? {
            let path = out.join("histograms").join(format!("{key}.csv"));
            write_checked(&path, &bytes, force)?;
            files.histograms.push(path);
        }
    }

    let results_path = input.join(RESULTS_FILE);
    if results_path.is_file() {
        let results: SweepResults = json::read_file(&results_path)?;
        // (method, other knob) -> knob value bits -> (value, final accuracies)
        type Groups = BTreeMap<(String, u64), BTreeMap<u64, (f64, Vec<f64>)>>;
        let mut by_fidelity: Groups = BTreeMap::new();
        let mut by_fraction: Groups = BTreeMap::new();
        for job in &results.jobs {
            let Some(rel) = &job.run else { continue };
            let acc = load_record(&input.join(rel))?.summary.ood.accuracy;
            let cell = &results.cells[job.cell];
            let method = cell.method.to_string();
            by_fidelity
                .entry((method.clone(), cell.pair_fraction.to_bits()))
                .or_default()
                .entry(cell.fidelity.to_bits())
                .or_insert((cell.fidelity, Vec::new()))
                .1
                .push(acc);
            by_fraction
                .entry((method, cell.fidelity.to_bits()))
                .or_default()
                .entry(cell.pair_fraction.to_bits())
                .or_insert((cell.pair_fraction, Vec::new()))
                .1
                .push(acc);
        }
        for ((method, other), points) in &by_fidelity {
            if points.len() < 2 {
                continue;
            }
            let name = format!("{}_pair_fraction-{}.csv", slug(method), format_real(f64::from_bits(*other)));
            let path = out.join("fidelity").join(name);
            write_checked(&path, &series_csv(points, "fidelity")?, force)?;
            files.fidelity_series.push(path);
        }
        for ((method, other), points) in &by_fraction {
            if points.len() < 2 {
                continue;
            }
            let name = format!("{}_fidelity-{}.csv", slug(method), format_real(f64::from_bits(*other)));
            let path = out.join("pair_fraction").join(name);
            write_checked(&path, &series_csv(points, "pair_fraction")?, force)?;
            files.fraction_series.push(path);
        }
    }
    Ok(files)
}
