use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use c2g_cli::commands;
use c2g_cli::{parse_seeds, CliError, ExperimentConfig, Overrides};
use c2g_core::{Method, Scenario};
use clap::{Args, Parser, Subcommand};

/// Select latent treatment responders under FDR control with causal
/// two-groups models.
#[derive(Parser)]
#[command(name = "c2g", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated datasets and their truth sidecars, one pair per seed.
    Simulate(Common),
    /// Fit one method to a dataset CSV and report selections as JSON.
    FitSelect {
        /// Dataset CSV with columns x1..xd, y, t and optionally h.
        data: PathBuf,
        /// Truth sidecar written by `simulate`; required by np-oracle.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate, fit and score every seed; write metric, curve and
    /// aggregate tables.
    Benchmark(Common),
    /// Recompute the aggregate table from a metrics CSV.
    Metrics {
        input: PathBuf,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// A single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seeds as `1,2,3` or the half-open range `0..50`.
    #[arg(long, value_parser = parse_seed_list)]
    seeds: Option<SeedList>,
    /// Comma-separated FDR levels.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Comma-separated methods: add-c2g, np-c2g, np-oracle, frequentist-bh.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Option<Vec<Method>>,
    /// Scale covariates to unit variance before fitting.
    #[arg(long)]
    standardize: bool,
    /// Output directory, or output file for fit-select.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds processed in parallel.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: c2g_core::Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: c2g_core::Error| e.to_string())
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig, CliError> {
        let flags = Overrides {
            scenario: self.scenario,
            n: self.n,
            d: self.d,
            tau: self.tau,
            seeds: self.seeds.map(|s| s.0).or(self.seed.map(|s| vec![s])),
            alphas: self.alpha,
            methods: self.method,
            standardize: self.standardize,
            out: self.out,
            workers: self.workers,
        };
        ExperimentConfig::resolve(self.config.as_deref(), flags)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.resolve()?;
            for f in commands::simulate(&cfg)? {
                println!("{}\t{}", f.dataset.display(), f.truth.display());
            }
        }
        Command::FitSelect { data, truth, common } => {
            let mut cfg = common.resolve()?;
            let out = cfg.out.take();
            let report = commands::fit_select(&cfg, &data, truth.as_deref())?;
            let json = serde_json::to_string_pretty(&report).map_err(c2g_core::Error::from)?;
            match out {
                Some(p) => std::fs::write(&p, json + "\n").map_err(|source| CliError::Io { context: format!("cannot write {}", p.display()), source })?,
                None => println!("{json}"),
            }
        }
        Command::Benchmark(common) => {
            let cfg = common.resolve()?;
            let summary = commands::benchmark(&cfg, |line| eprintln!("{line}"))?;
            let mut out = std::io::stdout().lock();
            for a in &summary.aggregates {
                let _ = writeln!(
                    out,
                    "{:<15} alpha={:<5} fdr={:.3}±{:.3} power={:.3}±{:.3} valid_power={:.3}",
                    a.method, a.alpha, a.mean_fdr, a.ci95_fdr, a.mean_power, a.ci95_power, a.valid_power
                );
            }
            if !summary.failures.is_empty() {
                eprintln!("{} failures recorded in {}", summary.failures.len(), summary.dir.join(commands::FAILURES_FILE).display());
            }
        }
        Command::Metrics { input, out } => {
            let aggregates = commands::metrics(&input)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|source| CliError::Io { context: format!("cannot create {}", p.display()), source })?;
                    commands::write_aggregates(std::io::BufWriter::new(f), &input, &aggregates)?;
                }
                None => commands::write_aggregates(std::io::stdout().lock(), &input, &aggregates)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
