//! Additive-errors estimator.
//!
//! Outcomes are `mu_h(x) + eps` with a shared noise density `g`. The fit is
//! stagewise: kernel ridge regression for `mu_0` on the untreated group,
//! predictive recursion on its leave-one-out residuals for `g`, then EM on
//! the treated group for the responder probability `pi(x)` (logistic) and
//! the responder mean `mu_1(x) = mu_0(x) + c_0 + phi(x)'c` (linear), both on
//! random Fourier features `phi`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_by_treatment, Dataset};
use crate::density::pr::{default_pr_bandwidths, fit_prml};
use crate::density::{PrConfig, PrDensity};
use crate::error::{Error, Result};
use crate::kernel::{default_krr_grids, loo_predictions, median_heuristic, tune_krr, KrrModel, RffMap};
use crate::np_c2g::EstimandReport;
use crate::optim::{maximize, OptimConfig};
use crate::rng::{derive_seed, stream, streams};
use crate::selection::{PosteriorScores, ScoreSource};
use crate::simgen::sigmoid;

/// A residual density that can report `log g` and its derivative.
pub trait ResidualDensity {
    fn log_density_and_slope(&self, r: f64) -> (f64, f64);
}

impl ResidualDensity for PrDensity {
    fn log_density_and_slope(&self, r: f64) -> (f64, f64) {
        PrDensity::log_density_and_slope(self, r)
    }
}

/// Normal noise with standard deviation `sd`.
#[derive(Debug, Clone, Copy)]
pub struct NormalResidual(pub f64);

impl ResidualDensity for NormalResidual {
    fn log_density_and_slope(&self, r: f64) -> (f64, f64) {
        let s2 = self.0 * self.0;
        (crate::density::normal_log_pdf(r, 0.0, self.0), -r / s2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AddC2gConfig {
    pub rff_dim: usize,
    /// Candidate feature bandwidths as multiples of the median heuristic.
    pub rff_bandwidth_multipliers: Vec<f64>,
    pub folds: usize,
    pub max_em_iter: usize,
    /// Relative log-likelihood change that ends EM.
    pub em_tol: f64,
    /// Ridge penalty on the feature coefficients of both M-step models.
    pub l2: f64,
    pub restarts: usize,
    pub pi_clamp: f64,
    pub m_step: MStepConfig,
    pub pr: PrConfig,
    pub pr_bandwidths: Option<Vec<f64>>,
    pub krr_bandwidths: Option<Vec<f64>>,
    pub krr_ridges: Option<Vec<f64>>,
}

impl Default for AddC2gConfig {
    fn default() -> Self {
        Self {
            rff_dim: 256,
            rff_bandwidth_multipliers: vec![0.5, 1.0, 2.0],
            folds: 5,
            max_em_iter: 200,
            em_tol: 1e-7,
            l2: 1.0,
            restarts: 1,
            pi_clamp: 1e-4,
            m_step: MStepConfig::default(),
            pr: PrConfig::default(),
            pr_bandwidths: None,
            krr_bandwidths: None,
            krr_ridges: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MStepConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 200 }
    }
}

/// `intercept + phi' coef` on a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn constant(intercept: f64, dim: usize) -> Self {
        Self { intercept, coef: vec![0.0; dim] }
    }

    pub fn eval(&self, phi: &DMatrix<f64>) -> Vec<f64> {
        let c = DVector::from_column_slice(&self.coef);
        (phi * c).iter().map(|v| v + self.intercept).collect()
    }

    fn params(&self) -> Vec<f64> {
        std::iter::once(self.intercept).chain(self.coef.iter().copied()).collect()
    }

    fn from_params(p: &[f64]) -> Self {
        Self { intercept: p[0], coef: p[1..].to_vec() }
    }
}

/// EM state: `pi(x) = sigmoid(pi_logit(x))` and `mu_1(x) = mu_0(x) + mu1_offset(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmParams {
    pub pi_logit: LinearModel,
    pub mu1_offset: LinearModel,
}

impl EmParams {
    pub fn pi(&self, phi: &DMatrix<f64>, clamp: f64) -> Vec<f64> {
        self.pi_logit.eval(phi).into_iter().map(|z| clamp_pi(sigmoid(z), clamp)).collect()
    }

    pub fn mu1(&self, phi: &DMatrix<f64>, mu0: &[f64]) -> Vec<f64> {
        self.mu1_offset.eval(phi).into_iter().zip(mu0).map(|(o, m)| m + o).collect()
    }
}

pub fn clamp_pi(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Null posterior `(1-pi) g(y-mu0) / [(1-pi) g(y-mu0) + pi g(y-mu1)]`,
/// evaluated in log space. Returns 1 when both terms vanish.
pub fn em_e_step<G: ResidualDensity>(g: &G, mu0: f64, mu1: f64, pi: f64, y: f64) -> f64 {
    e_step_terms(g, mu0, mu1, pi, y).0
}

/// `(w, log mixture density, both components vanished)`.
fn e_step_terms<G: ResidualDensity>(g: &G, mu0: f64, mu1: f64, pi: f64, y: f64) -> (f64, f64, bool) {
    let a = (1.0 - pi).ln() + g.log_density_and_slope(y - mu0).0;
    let b = pi.ln() + g.log_density_and_slope(y - mu1).0;
    let total = log_sum_exp2(a, b);
    if total == f64::NEG_INFINITY || total.is_nan() {
        return (1.0, f64::NEG_INFINITY, true);
    }
    ((a - total).exp().clamp(0.0, 1.0), total, false)
}

/// Treated-group data for EM.
pub struct EmProblem<'a, G> {
    pub phi: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub mu0: &'a [f64],
    pub g: &'a G,
    pub l2: f64,
    pub pi_clamp: f64,
}

impl<G: ResidualDensity> EmProblem<'_, G> {
    /// Weights, penalized observed-data log-likelihood and the number of
    /// samples where both mixture components vanished.
    pub fn e_step(&self, params: &EmParams) -> (Vec<f64>, f64, usize) {
        let pi = params.pi(self.phi, self.pi_clamp);
        let mu1 = params.mu1(self.phi, self.mu0);
        let mut w = Vec::with_capacity(self.y.len());
        let mut ll = 0.0;
        let mut zero = 0;
        for i in 0..self.y.len() {
            let (wi, li, z) = e_step_terms(self.g, self.mu0[i], mu1[i], pi[i], self.y[i]);
            w.push(wi);
            ll += li;
            zero += usize::from(z);
        }
        (w, ll - self.penalty(params), zero)
    }

    fn penalty(&self, p: &EmParams) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>();
        0.5 * self.l2 * (sq(&p.pi_logit.coef) + sq(&p.mu1_offset.coef))
    }
}

/// Diagnostics of one M-step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MStepInfo {
    /// Every weight was 1, so `mu_1` had no responder mass and was kept.
    pub all_null: bool,
    pub pi_converged: bool,
    pub mu1_converged: bool,
}

/// Maximizes `sum_i [w_i log(1 - pi_i) + (1 - w_i) log pi_i] - l2/2 |b|^2`
/// over logistic models on `phi`, starting from `start`.
pub fn fit_pi_model(w: &[f64], phi: &DMatrix<f64>, l2: f64, start: &LinearModel, cfg: MStepConfig) -> (LinearModel, bool) {
    let n = w.len();
    let r = maximize(
        |p, grad| {
            let c = DVector::from_column_slice(&p[1..]);
            let z = phi * &c;
            let mut resid = DVector::zeros(n);
            let mut val = 0.0;
            for i in 0..n {
                let zi = z[i] + p[0];
                // log sigmoid(z) and log(1 - sigmoid(z)), stable for large |z|.
                let log_p = -softplus_neg(zi);
                let log_q = -softplus_neg(-zi);
                val += w[i] * log_q + (1.0 - w[i]) * log_p;
                resid[i] = (1.0 - w[i]) - sigmoid(zi);
            }
            let gc = phi.tr_mul(&resid);
            grad[0] = resid.sum();
            for j in 0..c.len() {
                grad[j + 1] = gc[j] - l2 * c[j];
            }
            val - 0.5 * l2 * c.norm_squared()
        },
        start.params(),
        OptimConfig { max_iter: cfg.max_iter, grad_tol: cfg.grad_tol, memory: 10 },
    );
    (LinearModel::from_params(&r.x), r.converged)
}

/// `log(1 + exp(-z))`.
fn softplus_neg(z: f64) -> f64 {
    crate::simgen::softplus(-z)
}

/// Maximizes `sum_i (1 - w_i) log g(y_i - mu0_i - o(x_i)) - l2/2 |c|^2` over
/// offsets `o = c_0 + phi'c`.
pub fn fit_mu1_model<G: ResidualDensity>(
    w: &[f64],
    phi: &DMatrix<f64>,
    y: &[f64],
    mu0: &[f64],
    g: &G,
    l2: f64,
    start: &LinearModel,
    cfg: MStepConfig,
) -> (LinearModel, bool) {
    let n = w.len();
    let r = maximize(
        |p, grad| {
            let c = DVector::from_column_slice(&p[1..]);
            let o = phi * &c;
            let mut s = DVector::zeros(n);
            let mut val = 0.0;
            for i in 0..n {
                let v = 1.0 - w[i];
                if v == 0.0 {
                    continue;
                }
                let (lg, slope) = g.log_density_and_slope(y[i] - mu0[i] - p[0] - o[i]);
                val += v * lg;
                s[i] = -v * slope;
            }
            let gc = phi.tr_mul(&s);
            grad[0] = s.sum();
            for j in 0..c.len() {
                grad[j + 1] = gc[j] - l2 * c[j];
            }
            val - 0.5 * l2 * c.norm_squared()
        },
        start.params(),
        OptimConfig { max_iter: cfg.max_iter, grad_tol: cfg.grad_tol, memory: 10 },
    );
    (LinearModel::from_params(&r.x), r.converged)
}

/// Both M-step updates from the current weights.
pub fn em_m_step<G: ResidualDensity>(
    w: &[f64],
    problem: &EmProblem<'_, G>,
    prev: &EmParams,
    cfg: MStepConfig,
) -> (EmParams, MStepInfo) {
    let (pi_logit, pi_converged) = fit_pi_model(w, problem.phi, problem.l2, &prev.pi_logit, cfg);
    let all_null = w.iter().all(|&v| v >= 1.0);
    let (mu1_offset, mu1_converged) = if all_null {
        (prev.mu1_offset.clone(), true)
    } else {
        fit_mu1_model(w, problem.phi, problem.y, problem.mu0, problem.g, problem.l2, &prev.mu1_offset, cfg)
    };
    (EmParams { pi_logit, mu1_offset }, MStepInfo { all_null, pi_converged, mu1_converged })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// The log-likelihood never rose above its value after the first
    /// iteration.
    pub no_improvement: bool,
    /// Iterations whose M-step found no responder mass.
    pub all_null_steps: usize,
    /// Final E-step samples where both components vanished (set to w = 1).
    pub zero_density: usize,
    /// Final E-step samples whose `pi` hit the clamp bounds.
    pub clamped: usize,
    pub m_step_unconverged: usize,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: EmParams,
    pub w: Vec<f64>,
    /// Penalized log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    pub diagnostics: EmDiagnostics,
}

/// Runs EM from `init` until the relative log-likelihood change drops below
/// `tol` or `max_iter` iterations pass.
pub fn run_em<G: ResidualDensity>(
    problem: &EmProblem<'_, G>,
    init: EmParams,
    max_iter: usize,
    tol: f64,
    m_cfg: MStepConfig,
) -> EmOutcome {
    let mut params = init;
    let (mut w, mut ll, _) = problem.e_step(&params);
    let mut trace = vec![ll];
    let mut diag = EmDiagnostics::default();
    for _ in 0..max_iter {
        let (next, info) = em_m_step(&w, problem, &params, m_cfg);
        diag.iterations += 1;
        diag.all_null_steps += usize::from(info.all_null);
        diag.m_step_unconverged += usize::from(!(info.pi_converged && info.mu1_converged));
        params = next;
        let (w_new, ll_new, _) = problem.e_step(&params);
        trace.push(ll_new);
        w = w_new;
        let change = (ll_new - ll).abs() / ll.abs().max(1e-300);
        ll = ll_new;
        if change < tol {
            diag.converged = true;
            break;
        }
    }
    let (w_final, _, zero) = problem.e_step(&params);
    w = w_final;
    diag.zero_density = zero;
    let raw: Vec<f64> = params.pi_logit.eval(problem.phi).into_iter().map(sigmoid).collect();
    diag.clamped = raw.iter().filter(|&&p| p != clamp_pi(p, problem.pi_clamp)).count();
    if trace.len() > 2 {
        diag.no_improvement = trace.last().copied().unwrap_or(f64::NAN) <= trace[1];
    }
    EmOutcome { params, w, trace, diagnostics: diag }
}

/// Initial state: `pi = 1/2` and `mu_1 = mu_0 + offset`.
pub fn initial_params(offset: f64, dim: usize) -> EmParams {
    EmParams { pi_logit: LinearModel::constant(0.0, dim), mu1_offset: LinearModel::constant(offset, dim) }
}

/// Fold of each of `n` samples, from a seeded shuffle of `0..n` dealt
/// round-robin into `k` folds.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, streams::FOLDS));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn pick<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Held-out mixture log-likelihood of one candidate feature bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandwidthScore {
    pub bandwidth: f64,
    pub heldout_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct AddC2gFit {
    pub mu0: KrrModel,
    pub g_hat: PrDensity,
    pub rff: RffMap,
    /// Full-data EM parameters at the selected bandwidth.
    pub params: EmParams,
    /// Null posteriors of the treated samples from cross-fitted models.
    pub w: PosteriorScores,
    /// Cross-fitted `pi(x_i)` for each treated sample (clamped).
    pub pi_hat: Vec<f64>,
    /// Cross-fitted `mu_1(x_i)` for each treated sample.
    pub mu1_hat: Vec<f64>,
    /// `mu_0(x_i)` for each treated sample.
    pub mu0_hat: Vec<f64>,
    /// Fold of each treated sample, aligned with `w.indices()`.
    pub folds: Vec<usize>,
    pub bandwidth_scores: Vec<BandwidthScore>,
    pub em_trace: Vec<f64>,
    pub diagnostics: EmDiagnostics,
}

impl AddC2gFit {
    pub fn treated(&self) -> &[usize] {
        self.w.indices()
    }

    /// `pi(x)` from the full-data model.
    pub fn predict_pi(&self, x: &[f64], clamp: f64) -> Vec<f64> {
        self.params.pi(&self.rff.features(x), clamp)
    }

    /// `mu_1(x)` from the full-data model.
    pub fn predict_mu1(&self, x: &[f64]) -> Vec<f64> {
        let mu0 = self.mu0.predict_many(x);
        self.params.mu1(&self.rff.features(x), &mu0)
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// EM with `restarts` starting points: the prescribed one, then random
/// offsets. Keeps the run with the highest final log-likelihood.
fn em_with_restarts<G: ResidualDensity>(problem: &EmProblem<'_, G>, offset: f64, cfg: &AddC2gConfig, seed: u64) -> EmOutcome {
    let dim = problem.phi.ncols();
    let mut best = run_em(problem, initial_params(offset, dim), cfg.max_em_iter, cfg.em_tol, cfg.m_step);
    let mut rng = stream(seed, streams::EM_RESTARTS);
    for _ in 1..cfg.restarts.max(1) {
        let scale = rng.random_range(0.25..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let out = run_em(problem, initial_params(offset * scale, dim), cfg.max_em_iter, cfg.em_tol, cfg.m_step);
        if out.trace.last() > best.trace.last() {
            best = out;
        }
    }
    best
}

/// Fits the additive model to a dataset with both treatment groups.
pub fn fit_add_c2g(ds: &Dataset, cfg: &AddC2gConfig, seed: u64) -> Result<AddC2gFit> {
    if cfg.folds < 2 || cfg.rff_dim == 0 || cfg.rff_bandwidth_multipliers.is_empty() {
        return Err(Error::InvalidInput("need >= 2 folds, a positive feature dimension and bandwidth candidates".into()));
    }
    if !(cfg.pi_clamp > 0.0 && cfg.pi_clamp < 0.5) {
        return Err(Error::InvalidInput(format!("pi clamp must lie in (0, 0.5), got {}", cfg.pi_clamp)));
    }
    let split = split_by_treatment(ds)?;
    let d = ds.d();
    if split.untreated.len() < 2 {
        return Err(Error::InvalidInput("the untreated group needs at least two samples".into()));
    }
    if split.treated.len() < cfg.folds {
        return Err(Error::InvalidInput(format!(
            "the treated group has {} samples, fewer than {} folds",
            split.treated.len(),
            cfg.folds
        )));
    }

    let (x0, y0) = ds.subset_rows(&split.untreated);
    let (bw_default, ridge_default) = default_krr_grids(&x0, d);
    let bws = cfg.krr_bandwidths.clone().unwrap_or(bw_default);
    let ridges = cfg.krr_ridges.clone().unwrap_or(ridge_default);
    let mu0 = tune_krr(&x0, d, &y0, &bws, &ridges)?;
    let loo = loo_predictions(&mu0, &y0)?;
    let resid: Vec<f64> = y0.iter().zip(&loo).map(|(y, p)| y - p).collect();
    let pr_candidates = cfg.pr_bandwidths.clone().unwrap_or_else(|| default_pr_bandwidths(&resid));
    let g_hat = fit_prml(&resid, &pr_candidates, &cfg.pr, derive_seed(seed, streams::PR_PERMUTATIONS))?;

    let (x1, y1) = ds.subset_rows(&split.treated);
    let n1 = y1.len();
    let mu0_hat = mu0.predict_many(&x1);
    let treated_resid: Vec<f64> = y1.iter().zip(&mu0_hat).map(|(y, m)| y - m).collect();
    let offset = sample_sd(&treated_resid);
    let folds = assign_folds(n1, cfg.folds, seed);
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.folds)
        .map(|f| ((0..n1).filter(|&i| folds[i] != f).collect(), (0..n1).filter(|&i| folds[i] == f).collect()))
        .collect();

    let median = median_heuristic(&x1, d);
    let median = if median > 0.0 { median } else { 1.0 };
    let rff_seed = derive_seed(seed, streams::RFF);
    let mut scores = Vec::new();
    let mut best: Option<(f64, RffMap, DMatrix<f64>, Vec<f64>, Vec<f64>)> = None;
    for &mult in &cfg.rff_bandwidth_multipliers {
        let bw = mult * median;
        let rff = RffMap::new(d, cfg.rff_dim, bw, rff_seed)?;
        let phi = rff.features(&x1);
        let mut pi_cf = vec![0.0; n1];
        let mut mu1_cf = vec![0.0; n1];
        let mut heldout = 0.0;
        for (train, test) in &fold_rows {
            let phi_tr = select_rows(&phi, train);
            let (y_tr, m_tr) = (pick(&y1, train), pick(&mu0_hat, train));
            let problem = EmProblem { phi: &phi_tr, y: &y_tr, mu0: &m_tr, g: &g_hat, l2: cfg.l2, pi_clamp: cfg.pi_clamp };
            let out = em_with_restarts(&problem, offset, cfg, seed);
            let phi_te = select_rows(&phi, test);
            let m_te = pick(&mu0_hat, test);
            let p = out.params.pi(&phi_te, cfg.pi_clamp);
            let m1 = out.params.mu1(&phi_te, &m_te);
            for (k, &i) in test.iter().enumerate() {
                pi_cf[i] = p[k];
                mu1_cf[i] = m1[k];
                heldout += e_step_terms(&g_hat, mu0_hat[i], m1[k], p[k], y1[i]).1;
            }
        }
        scores.push(BandwidthScore { bandwidth: bw, heldout_loglik: heldout });
        if best.as_ref().is_none_or(|b| heldout > b.0) {
            best = Some((heldout, rff, phi, pi_cf, mu1_cf));
        }
    }
    let (_, rff, phi, pi_hat, mu1_hat) = best.ok_or_else(|| Error::NoFiniteCandidate("no feature bandwidth".into()))?;

    let problem = EmProblem { phi: &phi, y: &y1, mu0: &mu0_hat, g: &g_hat, l2: cfg.l2, pi_clamp: cfg.pi_clamp };
    let full = em_with_restarts(&problem, offset, cfg, seed);
    let w: Vec<f64> = (0..n1).map(|i| em_e_step(&g_hat, mu0_hat[i], mu1_hat[i], pi_hat[i], y1[i])).collect();
    let w = PosteriorScores::new(split.treated.clone(), w, ScoreSource::Additive)?;
    Ok(AddC2gFit {
        mu0,
        g_hat,
        rff,
        params: full.params,
        w,
        pi_hat,
        mu1_hat,
        mu0_hat,
        folds,
        bandwidth_scores: scores,
        em_trace: full.trace,
        diagnostics: full.diagnostics,
    })
}

/// CARE point estimates `mu_1(x) - mu_0(x)` and ERPF, the mean of `pi(x)`,
/// over the treated samples, using the cross-fitted predictions.
pub fn add_c2g_estimands(fit: &AddC2gFit) -> EstimandReport {
    let care: Vec<f64> = fit.mu1_hat.iter().zip(&fit.mu0_hat).map(|(a, b)| a - b).collect();
    EstimandReport::from_parts(fit.treated().to_vec(), care.clone(), care, vec![false; fit.mu1_hat.len()], fit.pi_hat.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::gen_additive;

    fn quick_cfg() -> AddC2gConfig {
        AddC2gConfig { rff_dim: 64, rff_bandwidth_multipliers: vec![1.0], folds: 3, ..Default::default() }
    }

    #[test]
    fn e_step_limits_and_symmetry() {
        let g = NormalResidual(1.0);
        assert!(em_e_step(&g, 0.0, 3.0, 1e-12, 1.0) > 1.0 - 1e-10);
        assert!(em_e_step(&g, 0.0, 3.0, 1.0 - 1e-12, 1.0) < 1e-10);
        assert!((em_e_step(&g, 0.0, 3.0, 0.5, 1.5) - 0.5).abs() < 1e-15);
        // Far in the tail both normal terms underflow, but the log-space
        // computation still resolves the ratio.
        assert!(em_e_step(&g, 0.0, 3.0, 0.5, 60.0) < 1e-12);
        // Identical components give w = 1 - pi.
        assert!((em_e_step(&g, 1.0, 1.0, 0.3, 2.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_pi_is_mean_responder_weight() {
        let w = [0.1, 0.9, 0.4, 0.0, 1.0, 0.25];
        let phi = DMatrix::<f64>::zeros(6, 0);
        let (m, ok) = fit_pi_model(&w, &phi, 1.0, &LinearModel::constant(0.0, 0), MStepConfig::default());
        assert!(ok);
        let target = w.iter().map(|v| 1.0 - v).sum::<f64>() / 6.0;
        assert!((sigmoid(m.intercept) - target).abs() < 1e-7);
    }

    #[test]
    fn constant_mu1_with_normal_noise_is_mean() {
        let y = [1.0, 2.5, -0.3, 4.0];
        let mu0 = [0.0; 4];
        let phi = DMatrix::<f64>::zeros(4, 0);
        let (m, ok) = fit_mu1_model(&[0.0; 4], &phi, &y, &mu0, &NormalResidual(1.0), 1.0, &LinearModel::constant(0.0, 0), MStepConfig::default());
        assert!(ok);
        assert!((m.intercept - 7.2 / 4.0).abs() < 1e-7);
        // Weighted least squares with weights 1 - w.
        let w = [0.5, 0.0, 1.0, 0.75];
        let (m, _) = fit_mu1_model(&w, &phi, &y, &mu0, &NormalResidual(1.0), 1.0, &LinearModel::constant(0.0, 0), MStepConfig::default());
        let wls = (0.5 * 1.0 + 2.5 + 0.25 * 4.0) / 1.75;
        assert!((m.intercept - wls).abs() < 1e-7);
    }

    #[test]
    fn em_never_decreases_penalized_likelihood() {
        for seed in 0..4 {
            let (ds, _) = gen_additive(300, 3, 3.0, seed).unwrap();
            let fit = fit_add_c2g(&ds, &quick_cfg(), seed).unwrap();
            for pair in fit.em_trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-6 * pair[0].abs().max(1.0), "{:?}", pair);
            }
            assert!(fit.w.w().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(fit.pi_hat.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn posteriors_are_the_e_step_of_the_final_predictions() {
        let (ds, _) = gen_additive(250, 2, 4.0, 7).unwrap();
        let fit = fit_add_c2g(&ds, &quick_cfg(), 7).unwrap();
        for (k, &i) in fit.treated().iter().enumerate() {
            let w = em_e_step(&fit.g_hat, fit.mu0_hat[k], fit.mu1_hat[k], fit.pi_hat[k], ds.y()[i]);
            assert_eq!(w, fit.w.w()[k]);
        }
    }

    #[test]
    fn cross_fitted_predictions_come_from_other_folds() {
        let (ds, _) = gen_additive(200, 2, 4.0, 8).unwrap();
        let cfg = quick_cfg();
        let fit = fit_add_c2g(&ds, &cfg, 8).unwrap();
        let split = split_by_treatment(&ds).unwrap();
        let (x1, y1) = ds.subset_rows(&split.treated);
        let phi = fit.rff.features(&x1);
        // Refit the model for fold 0 and check its held-out predictions.
        let train: Vec<usize> = (0..y1.len()).filter(|&i| fit.folds[i] != 0).collect();
        let test: Vec<usize> = (0..y1.len()).filter(|&i| fit.folds[i] == 0).collect();
        let offset = sample_sd(&y1.iter().zip(&fit.mu0_hat).map(|(y, m)| y - m).collect::<Vec<_>>());
        let phi_tr = select_rows(&phi, &train);
        let (y_tr, m_tr) = (pick(&y1, &train), pick(&fit.mu0_hat, &train));
        let problem = EmProblem { phi: &phi_tr, y: &y_tr, mu0: &m_tr, g: &fit.g_hat, l2: cfg.l2, pi_clamp: cfg.pi_clamp };
        let out = em_with_restarts(&problem, offset, &cfg, 8);
        let p = out.params.pi(&select_rows(&phi, &test), cfg.pi_clamp);
        for (k, &i) in test.iter().enumerate() {
            assert_eq!(p[k], fit.pi_hat[i]);
        }
        let counts: Vec<usize> = (0..3).map(|f| fit.folds.iter().filter(|&&v| v == f).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn zero_effect_gives_null_posterior_one_minus_pi() {
        let (ds, _) = gen_additive(200, 2, 0.0, 3).unwrap();
        let fit = fit_add_c2g(&ds, &quick_cfg(), 3).unwrap();
        let g = &fit.g_hat;
        // With mu_1 = mu_0 the two components coincide.
        for k in 0..fit.pi_hat.len() {
            let y = ds.y()[fit.treated()[k]];
            let w = em_e_step(g, fit.mu0_hat[k], fit.mu0_hat[k], fit.pi_hat[k], y);
            assert!((w - (1.0 - fit.pi_hat[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let f = assign_folds(23, 5, 1);
        assert_eq!(f, assign_folds(23, 5, 1));
        let counts: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&v| v == k).count()).collect();
        assert_eq!(counts.iter().sum::<usize>(), 23);
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (ds, _) = gen_additive(40, 2, 1.0, 1).unwrap();
        assert!(fit_add_c2g(&ds, &AddC2gConfig { folds: 1, ..quick_cfg() }, 1).is_err());
        assert!(fit_add_c2g(&ds, &AddC2gConfig { pi_clamp: 0.0, ..quick_cfg() }, 1).is_err());
        let t = vec![true; 40];
        let all_treated = Dataset::new(ds.x().to_vec(), 2, ds.y().to_vec(), t, None).unwrap();
        assert!(matches!(fit_add_c2g(&all_treated, &quick_cfg(), 1), Err(Error::EmptyGroup(_))));
    }
}
