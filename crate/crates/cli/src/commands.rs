//! The four subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use c2g_core::pipeline::{aggregate, run_seed, Aggregate, ExperimentSpec, MetricRow};
use c2g_core::simgen::generate;
use c2g_core::{load_dataset, run_method, GeneratorTruth, MethodOutput, SelectionResult};
use serde::{Deserialize, Serialize};

use crate::output::{for_each_ordered, read_table, Table};
use crate::{CliError, ExperimentConfig, Result};

const DEFAULT_OUT: &str = "c2g-out";

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir).map_err(CliError::io(format!("cannot create {}", dir.display())))?;
    Ok(dir)
}

fn header(command: &str, cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<String> {
    let mut lines = vec![format!("c2g {command} {}", env!("CARGO_PKG_VERSION")), format!("config: {}", cfg.to_header())];
    if let Some(s) = seed {
        lines.push(format!("seed: {s}"));
    }
    lines
}

/// Truth sidecar written next to each simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub truth: GeneratorTruth,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyTruth {
    Wrapped(Box<TruthFile>),
    Bare(Box<GeneratorTruth>),
}

/// Reads a truth sidecar, or a bare serialized [`GeneratorTruth`].
pub fn read_truth(path: &Path) -> Result<GeneratorTruth> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("cannot read {}", path.display())))?;
    match serde_json::from_str::<AnyTruth>(&text) {
        Ok(AnyTruth::Wrapped(t)) => Ok(t.truth),
        Ok(AnyTruth::Bare(t)) => Ok(*t),
        Err(e) => Err(CliError::Config(format!("{}: not a truth file: {e}", path.display()))),
    }
}

pub struct SimulatedFiles {
    pub seed: u64,
    pub dataset: PathBuf,
    pub truth: PathBuf,
}

/// Writes `<scenario>-n<n>-seed<seed>.csv` and a `-truth.json` sidecar for
/// every seed.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<SimulatedFiles>> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let mut files = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (ds, truth) = generate(cfg.scenario, cfg.n, cfg.d, cfg.tau, seed)?;
        let stem = format!("{}-n{}-seed{seed}", cfg.scenario, cfg.n);
        let dataset = dir.join(format!("{stem}.csv"));
        let truth_path = dir.join(format!("{stem}-truth.json"));
        ds.save_csv(&dataset, Some(&header("simulate", cfg, Some(seed)).join("\n")))?;
        let sidecar = TruthFile { config: cfg.clone(), seed, truth };
        let f = std::fs::File::create(&truth_path).map_err(CliError::io(format!("cannot create {}", truth_path.display())))?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, &sidecar).map_err(c2g_core::Error::from)?;
        w.flush().map_err(CliError::io(format!("cannot write {}", truth_path.display())))?;
        files.push(SimulatedFiles { seed, dataset, truth: truth_path });
    }
    Ok(files)
}

/// Result of `fit-select`.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub config: ExperimentConfig,
    pub dataset: PathBuf,
    pub seed: u64,
    pub selections: Vec<SelectionResult>,
    pub fit: MethodOutput,
}

/// Fits one method on a dataset file and selects at every level in
/// `cfg.alphas`. Levels may include 0, which selects nothing.
pub fn fit_select(cfg: &ExperimentConfig, data: &Path, truth: Option<&Path>) -> Result<FitReport> {
    let method = match cfg.methods.as_slice() {
        [m] => *m,
        _ => return Err(CliError::Config("fit-select takes exactly one --method".into())),
    };
    if cfg.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(CliError::Config("alpha must lie in [0, 1]".into()));
    }
    let ds = load_dataset(data, false)?;
    let ds = if cfg.standardize { ds.standardized() } else { ds };
    let truth = truth.map(read_truth).transpose()?;
    if let Some(t) = &truth {
        if t.n != ds.n() {
            return Err(CliError::Config(format!("truth describes {} samples but the dataset has {}", t.n, ds.n())));
        }
    }
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let fit = run_method(method, &ds, truth.as_ref(), &cfg.estimators, seed)?;
    let selections = cfg.alphas.iter().map(|&a| fit.select(a)).collect();
    Ok(FitReport { config: cfg.clone(), dataset: data.to_path_buf(), seed, selections, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub seed: u64,
    /// Method name, or `*` when the simulation itself failed.
    pub method: String,
    pub message: String,
}

pub struct BenchmarkSummary {
    pub rows: Vec<MetricRow>,
    pub curves: Vec<MetricRow>,
    pub failures: Vec<FailureRow>,
    pub aggregates: Vec<Aggregate>,
    pub dir: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// Simulates and scores every seed, appending each seed's rows to the
/// metrics, curve and failure tables as soon as all earlier seeds are done.
/// The aggregate table is written at the end.
pub fn benchmark(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<BenchmarkSummary> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let mut levels: Vec<f64> = cfg.alphas.iter().chain(&cfg.alpha_grid).copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let spec = ExperimentSpec {
        scenario: cfg.scenario,
        n: cfg.n,
        d: cfg.d,
        tau: cfg.tau,
        methods: cfg.methods.clone(),
        alphas: levels,
        estimators: cfg.estimators.clone(),
        standardize: cfg.standardize,
    };
    let head = header("benchmark", cfg, None);
    let mut metrics = Table::create(&dir.join(METRICS_FILE), &head)?;
    let mut curves = Table::create(&dir.join(CURVES_FILE), &head)?;
    let mut failed = Table::create(&dir.join(FAILURES_FILE), &head)?;
    let mut summary = BenchmarkSummary { rows: Vec::new(), curves: Vec::new(), failures: Vec::new(), aggregates: Vec::new(), dir: dir.clone() };

    for_each_ordered(
        &cfg.seeds,
        cfg.workers,
        |&seed| {
            let start = Instant::now();
            (run_seed(&spec, seed), start.elapsed())
        },
        |&seed, (outcome, elapsed)| {
            let (rows, failures) = match outcome {
                Ok(o) => (o.rows, o.failures.into_iter().map(|f| FailureRow { seed, method: f.method.to_string(), message: f.message }).collect()),
                Err(e) => (Vec::new(), vec![FailureRow { seed, method: "*".into(), message: e.to_string() }]),
            };
            for r in &rows {
                if cfg.alphas.contains(&r.alpha) {
                    metrics.write(r)?;
                    summary.rows.push(r.clone());
                }
                if cfg.alpha_grid.contains(&r.alpha) {
                    curves.write(r)?;
                    summary.curves.push(r.clone());
                }
            }
            for f in &failures {
                failed.write(f)?;
            }
            metrics.flush()?;
            curves.flush()?;
            failed.flush()?;
            progress(&format!("seed {seed}: {} rows, {} failures, {:.1}s", rows.len(), failures.len(), elapsed.as_secs_f64()));
            summary.failures.extend(failures);
            Ok(())
        },
    )?;

    summary.aggregates = aggregate(&summary.rows);
    let mut agg = Table::create(&dir.join(AGGREGATE_FILE), &head)?;
    for a in &summary.aggregates {
        agg.write(a)?;
    }
    agg.flush()?;
    if summary.rows.is_empty() && !summary.failures.is_empty() {
        return Err(CliError::AllFailed);
    }
    Ok(summary)
}

/// Recomputes the aggregate table from a metrics table.
pub fn metrics(input: &Path) -> Result<Vec<Aggregate>> {
    let f = std::fs::File::open(input).map_err(CliError::io(format!("cannot open {}", input.display())))?;
    let rows: Vec<MetricRow> = read_table(std::io::BufReader::new(f))?;
    Ok(aggregate(&rows))
}

/// Writes aggregates as CSV with a header naming their source.
pub fn write_aggregates<W: Write>(w: W, source: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut t = Table::new(w, &[format!("c2g metrics {}", env!("CARGO_PKG_VERSION")), format!("source: {}", source.display())])?;
    for a in aggregates {
        t.write(a)?;
    }
    t.flush()
}
