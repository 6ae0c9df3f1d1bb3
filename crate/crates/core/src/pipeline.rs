//! Running a method end to end and scoring it against simulation truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::add_c2g::{add_c2g_estimands, fit_add_c2g, AddC2gConfig, EmDiagnostics};
use crate::dataset::{split_by_treatment, Dataset};
use crate::density::{cde_tune, CdeGrid};
use crate::error::{Error, Result};
use crate::np_c2g::{empirical_control, fit_np_c2g, np_estimands, np_oracle_scores, oracle_estimands, EstimandReport, NpC2gConfig, NpDiagnostics};
use crate::selection::{bh_procedure, ci95_halfwidth, fdp, frequentist_pvalues, jaccard_intervals, mean, power, select_by_average, valid_power, PosteriorScores, ScoreSource, SelectionResult};
use crate::simgen::{generate, GeneratorTruth, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AddC2g,
    NpC2g,
    NpOracle,
    FrequentistBh,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::AddC2g, Method::NpC2g, Method::NpOracle, Method::FrequentistBh];

    pub fn name(self) -> &'static str {
        match self {
            Method::AddC2g => "add-c2g",
            Method::NpC2g => "np-c2g",
            Method::NpOracle => "np-oracle",
            Method::FrequentistBh => "frequentist-bh",
        }
    }

    /// Methods that report effect intervals.
    pub fn is_nonparametric(self) -> bool {
        matches!(self, Method::NpC2g | Method::NpOracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}` (expected one of add-c2g, np-c2g, np-oracle, frequentist-bh)")))
    }
}

/// Estimator settings shared by every method.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub add: AddC2gConfig,
    pub np: NpC2gConfig,
    /// Conditional density grid for the frequentist null model.
    pub frequentist_grid: Option<CdeGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodDiagnostics {
    Additive(EmDiagnostics),
    Nonparametric(NpDiagnostics),
}

/// Scores of one fitted method on the treated samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutput {
    pub method: Method,
    /// Null posteriors, or p-values for the frequentist baseline.
    pub scores: PosteriorScores,
    /// Untreated posteriors used by empirical control.
    pub untreated_scores: Option<PosteriorScores>,
    /// Prior responder probability per treated sample (`pi` or `pi*`).
    pub pi: Option<Vec<f64>>,
    pub estimands: Option<EstimandReport>,
    /// Level grid for empirical control.
    pub alpha_grid: Vec<f64>,
    pub diagnostics: Option<MethodDiagnostics>,
}

impl MethodOutput {
    /// Selection at nominal level `alpha`; empty for `alpha <= 0`.
    pub fn select(&self, alpha: f64) -> SelectionResult {
        if !(alpha > 0.0) {
            return SelectionResult::empty(alpha);
        }
        match self.method {
            Method::AddC2g | Method::NpOracle => select_by_average(&self.scores, alpha),
            Method::NpC2g => match &self.untreated_scores {
                Some(u) => empirical_control(&self.scores, u, &self.alpha_grid, alpha),
                None => select_by_average(&self.scores, alpha),
            },
            Method::FrequentistBh => {
                let p = self.scores.w();
                let pos = bh_procedure(p, alpha);
                let m = p.len() as f64;
                let estimated_fdr = pos.iter().map(|&k| p[k]).fold(0.0, f64::max) * m / pos.len().max(1) as f64;
                let mut selected: Vec<usize> = pos.iter().map(|&k| self.scores.indices()[k]).collect();
                selected.sort_unstable();
                SelectionResult { selected, level: alpha, estimated_fdr }
            }
        }
    }
}

/// Fits `method` on `ds`. The oracle needs generator truth with analytic
/// densities.
pub fn run_method(method: Method, ds: &Dataset, truth: Option<&GeneratorTruth>, cfg: &MethodConfig, seed: u64) -> Result<MethodOutput> {
    match method {
        Method::AddC2g => {
            let fit = fit_add_c2g(ds, &cfg.add, seed)?;
            let estimands = add_c2g_estimands(&fit);
            Ok(MethodOutput {
                method,
                pi: Some(fit.pi_hat.clone()),
                estimands: Some(estimands),
                diagnostics: Some(MethodDiagnostics::Additive(fit.diagnostics.clone())),
                scores: fit.w,
                untreated_scores: None,
                alpha_grid: Vec::new(),
            })
        }
        Method::NpC2g => {
            let fit = fit_np_c2g(ds, &cfg.np, seed)?;
            let estimands = np_estimands(&fit, None)?;
            Ok(MethodOutput {
                method,
                pi: Some(fit.pi_star.clone()),
                estimands: Some(estimands),
                diagnostics: Some(MethodDiagnostics::Nonparametric(fit.diagnostics.clone())),
                alpha_grid: cfg.np.alpha_grid.clone(),
                scores: fit.w,
                untreated_scores: Some(fit.w_untreated),
            })
        }
        Method::NpOracle => {
            let truth = truth.ok_or_else(|| Error::NoTruth("the oracle needs generator truth".into()))?;
            let estimands = oracle_estimands(truth, ds)?;
            Ok(MethodOutput {
                method,
                scores: np_oracle_scores(truth, ds)?,
                untreated_scores: None,
                pi: Some(estimands.pi.clone()),
                estimands: Some(estimands),
                alpha_grid: Vec::new(),
                diagnostics: None,
            })
        }
        Method::FrequentistBh => {
            let split = split_by_treatment(ds)?;
            let (x0, y0) = ds.subset_rows(&split.untreated);
            let grid = cfg.frequentist_grid.clone().unwrap_or_else(|| CdeGrid::default_for(&x0, ds.d(), &y0));
            let f0 = cde_tune(&x0, ds.d(), &y0, false, &grid)?;
            let points: Vec<(Vec<f64>, f64)> = split.treated.iter().map(|&i| (ds.row(i).to_vec(), ds.y()[i])).collect();
            let p = frequentist_pvalues(&f0, &points)?;
            Ok(MethodOutput {
                method,
                scores: PosteriorScores::new(split.treated, p, ScoreSource::Frequentist)?,
                untreated_scores: None,
                pi: None,
                estimands: None,
                alpha_grid: Vec::new(),
                diagnostics: None,
            })
        }
    }
}

/// One simulated experiment cell: a scenario at fixed size and effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub estimators: MethodConfig,
    /// Scale covariates to unit variance before fitting.
    #[serde(default)]
    pub standardize: bool,
}

/// Metrics of one method, seed and level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub scenario: Scenario,
    pub n: usize,
    pub tau: f64,
    pub alpha: f64,
    pub seed: u64,
    pub fdp: f64,
    /// Empty when the sample has no responders.
    pub power: Option<f64>,
    pub n_selected: usize,
    /// Jaccard index of the ARE interval with the oracle's, for methods that
    /// report intervals.
    pub jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SeedOutcome {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<SeedFailure>,
}

/// Simulates one seed and scores every method at every level. A method that
/// fails is recorded and the others still run.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutcome> {
    let (ds, truth) = generate(spec.scenario, spec.n, spec.d, spec.tau, seed)?;
    let ds = if spec.standardize { ds.standardized() } else { ds };
    let h = ds.h().ok_or_else(|| Error::NoTruth("simulated data lacks responder labels".into()))?.to_vec();
    let oracle_are = if spec.methods.iter().any(|m| m.is_nonparametric()) && truth.has_analytic() {
        Some(oracle_estimands(&truth, &ds)?.are_interval())
    } else {
        None
    };
    let mut out = SeedOutcome::default();
    for &method in &spec.methods {
        let fitted = match run_method(method, &ds, Some(&truth), &spec.estimators, seed) {
            Ok(f) => f,
            Err(e) => {
                out.failures.push(SeedFailure { seed, method, message: e.to_string() });
                continue;
            }
        };
        let jaccard = match (method.is_nonparametric(), &fitted.estimands, oracle_are) {
            (true, Some(r), Some(o)) => Some(jaccard_intervals(&[r.are_interval()], &[o])),
            _ => None,
        };
        for &alpha in &spec.alphas {
            let sel = fitted.select(alpha);
            out.rows.push(MetricRow {
                method,
                scenario: spec.scenario,
                n: spec.n,
                tau: spec.tau,
                alpha,
                seed,
                fdp: fdp(&sel.selected, &h),
                power: power(&sel.selected, &h),
                n_selected: sel.len(),
                jaccard,
            });
        }
    }
    Ok(out)
}

/// Across-seed summary of one method at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub alpha: f64,
    pub seeds: usize,
    pub mean_fdr: f64,
    pub ci95_fdr: f64,
    pub mean_power: f64,
    pub ci95_power: f64,
    pub valid_power: f64,
    pub mean_jaccard: Option<f64>,
    pub ci95_jaccard: Option<f64>,
}

/// Groups rows by method and level, in order of first appearance. Rows
/// without a defined power are left out of the power mean.
pub fn aggregate(rows: &[MetricRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(m, a)| m == r.method && a == r.alpha) {
            keys.push((r.method, r.alpha));
        }
    }
    keys.into_iter()
        .map(|(method, alpha)| {
            let group: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method && r.alpha == alpha).collect();
            let fdr: Vec<f64> = group.iter().map(|r| r.fdp).collect();
            let pow: Vec<f64> = group.iter().filter_map(|r| r.power).collect();
            let jac: Vec<f64> = group.iter().filter_map(|r| r.jaccard).collect();
            let (mean_fdr, ci95_fdr) = (mean(&fdr), ci95_halfwidth(&fdr));
            let mean_power = if pow.is_empty() { 0.0 } else { mean(&pow) };
            Aggregate {
                method,
                alpha,
                seeds: group.len(),
                mean_fdr,
                ci95_fdr,
                mean_power,
                ci95_power: ci95_halfwidth(&pow),
                valid_power: valid_power(mean_fdr, ci95_fdr, mean_power, alpha),
                mean_jaccard: (!jac.is_empty()).then(|| mean(&jac)),
                ci95_jaccard: (!jac.is_empty()).then(|| ci95_halfwidth(&jac)),
            }
        })
        .collect()
}
