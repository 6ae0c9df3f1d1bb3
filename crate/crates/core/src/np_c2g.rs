//! Fully nonparametric estimator.
//!
//! Both group densities are kNN conditional density estimates. The treated
//! law is a mixture `f_t = (1 - pi) f_0 + pi f_1`, so `pi(x)` is bounded below
//! by `pi*(x) = 1 - min_y f_t(y|x) / f_0(y|x)`. Null posteriors use bootstrap
//! quantile envelopes of both densities, selection uses empirical control
//! against the untreated group, and effects are reported as intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_by_treatment, Dataset};
use crate::density::bootstrap::column_quantiles;
use crate::density::{cde_tune, BootstrapCde, CdeGrid, CdeModel, DensityEnvelope};
use crate::error::{Error, Result};
use crate::selection::{select_by_average, PosteriorScores, ScoreSource, SelectionResult};
use crate::simgen::{Dist, GeneratorTruth};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NpC2gConfig {
    pub bootstrap: usize,
    pub q: f64,
    pub grid_points: usize,
    /// Padding of the outcome grid in multiples of the larger `h2`.
    pub grid_pad: f64,
    /// `pi*` at or below this leaves the effect interval unbounded.
    pub pi_floor: f64,
    pub alpha_grid: Vec<f64>,
    pub untreated_grid: Option<CdeGrid>,
    pub treated_grid: Option<CdeGrid>,
}

impl Default for NpC2gConfig {
    fn default() -> Self {
        Self {
            bootstrap: 100,
            q: 0.05,
            grid_points: 401,
            grid_pad: 6.0,
            pi_floor: 1e-3,
            alpha_grid: default_alpha_grid(),
            untreated_grid: None,
            treated_grid: None,
        }
    }
}

/// `0.01, 0.02, ..., 0.30`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=30).map(|k| k as f64 / 100.0).collect()
}

/// `m` equally spaced points from `lo` to `hi`.
pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (m - 1) as f64;
    (0..m).map(|i| lo + step * i as f64).collect()
}

/// Minimum of `num / den` over grid points where `den` is positive. `None`
/// when there is no such point.
fn min_ratio(num: &[f64], den: &[f64]) -> Option<f64> {
    num.iter()
        .zip(den)
        .filter(|(_, &d)| d > 0.0)
        .map(|(n, d)| n / d)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
}

/// `1 - min over the grid of f_t(y|x) / f_0(y|x)`, clamped to `[0, 1]`.
pub fn conservative_pi(f0: &CdeModel, ft: &CdeModel, x: &[f64], y_grid: &[f64]) -> Result<f64> {
    let a = f0.eval_many(x, y_grid, None)?;
    let b = ft.eval_many(x, y_grid, None)?;
    conservative_pi_grid(&a, &b)
}

/// `1 - min ft / f0` over grid values with `f0 > 0`, clamped to `[0, 1]`.
pub fn conservative_pi_grid(f0: &[f64], ft: &[f64]) -> Result<f64> {
    let r = min_ratio(ft, f0).ok_or_else(|| Error::ZeroDenominator("untreated density vanishes on the whole grid".into()))?;
    Ok((1.0 - r).clamp(0.0, 1.0))
}

/// Conservative null posterior from density envelopes: `[f0_hi(y) / ft_lo(y)]
/// * min_grid [ft_hi / f0_lo]`, clamped to `[0, 1]`. `None` signals a zero
/// denominator, which callers treat as `w = 1`.
///
/// `f0_lo` and `ft_hi` run along the grid; `at_y` holds `(f0_hi, ft_lo)` at
/// the query outcome.
pub fn envelope_posterior(f0_lo: &[f64], ft_hi: &[f64], at_y: (f64, f64)) -> Option<f64> {
    let (f0_hi_y, ft_lo_y) = at_y;
    if !(ft_lo_y > 0.0) {
        return None;
    }
    let m = min_ratio(ft_hi, f0_lo)?;
    let w = f0_hi_y / ft_lo_y * m;
    if w.is_nan() {
        None
    } else {
        Some(w.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Treated,
    Untreated,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NpDiagnostics {
    /// Samples whose posterior fell back to 1 on a zero denominator.
    pub zero_denominator: usize,
    /// Treated samples with `pi*` at or below the floor.
    pub unbounded: usize,
}

#[derive(Debug, Clone)]
pub struct NpC2gFit {
    pub f0: CdeModel,
    pub ft: CdeModel,
    pub y_grid: Vec<f64>,
    /// Envelopes at each treated sample's own `(x, y)`.
    pub envelopes_treated: (DensityEnvelope, DensityEnvelope),
    /// Conservative `pi*` at each treated sample: `1 - min_y ft_hi / f0_lo`.
    pub pi_star: Vec<f64>,
    /// `pi*` from the point estimates, `1 - min_y ft / f0`.
    pub pi_star_point: Vec<f64>,
    pub w: PosteriorScores,
    /// Posteriors of the untreated samples, for empirical control.
    pub w_untreated: PosteriorScores,
    pub mu0: Vec<f64>,
    pub mut_: Vec<f64>,
    pub diagnostics: NpDiagnostics,
    pub config: NpC2gConfig,
}

struct Evaluated {
    w: Option<f64>,
    pi_env: Option<f64>,
    f0: (f64, f64),
    ft: (f64, f64),
}

struct Booted<'a> {
    b0: &'a BootstrapCde,
    bt: &'a BootstrapCde,
    grid: &'a [f64],
    q: f64,
}

impl Booted<'_> {
    fn eval(&self, x: &[f64], y: f64, own: Group, row: usize) -> Result<Evaluated> {
        let mut ys = self.grid.to_vec();
        ys.push(y);
        let g = self.grid.len();
        let ex0 = (own == Group::Untreated).then_some(row);
        let ext = (own == Group::Treated).then_some(row);
        let (l0, h0) = column_quantiles(&self.b0.replicates(x, &ys, ex0)?, self.q);
        let (lt, ht) = column_quantiles(&self.bt.replicates(x, &ys, ext)?, self.q);
        let w = envelope_posterior(&l0[..g], &ht[..g], (h0[g], lt[g]));
        let pi_env = min_ratio(&ht[..g], &l0[..g]).map(|m| (1.0 - m).clamp(0.0, 1.0));
        Ok(Evaluated { w, pi_env, f0: (l0[g], h0[g]), ft: (lt[g], ht[g]) })
    }
}

/// Fits both group densities, their bootstrap envelopes and the posteriors
/// of every sample.
pub fn fit_np_c2g(ds: &Dataset, cfg: &NpC2gConfig, seed: u64) -> Result<NpC2gFit> {
    if cfg.grid_points < 2 || !(cfg.grid_pad >= 0.0) {
        return Err(Error::InvalidInput("grid needs >= 2 points, and non-negative padding".into()));
    }
    if cfg.alpha_grid.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidInput("alpha grid must be strictly increasing".into()));
    }
    let split = split_by_treatment(ds)?;
    let d = ds.d();
    let (x0, y0) = ds.subset_rows(&split.untreated);
    let (x1, y1) = ds.subset_rows(&split.treated);
    if y0.len() < 3 || y1.len() < 3 {
        return Err(Error::InvalidInput("each treatment group needs at least three samples".into()));
    }
    let g0 = cfg.untreated_grid.clone().unwrap_or_else(|| CdeGrid::default_for(&x0, d, &y0));
    let g1 = cfg.treated_grid.clone().unwrap_or_else(|| CdeGrid::default_for(&x1, d, &y1));
    let f0 = cde_tune(&x0, d, &y0, false, &g0)?;
    let ft = cde_tune(&x1, d, &y1, true, &g1)?;

    let (lo, hi) = ds.y().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = cfg.grid_pad * f0.h2().max(ft.h2());
    let y_grid = linspace(lo - pad, hi + pad, cfg.grid_points);

    let b0 = BootstrapCde::new(&f0, cfg.bootstrap, seed)?;
    let bt = BootstrapCde::new(&ft, cfg.bootstrap, seed)?;
    let booted = Booted { b0: &b0, bt: &bt, grid: &y_grid, q: cfg.q };

    let treated: Vec<Evaluated> = split
        .treated
        .par_iter()
        .enumerate()
        .map(|(k, &i)| booted.eval(ds.row(i), ds.y()[i], Group::Treated, k))
        .collect::<Result<_>>()?;
    let untreated: Vec<Evaluated> = split
        .untreated
        .par_iter()
        .enumerate()
        .map(|(k, &i)| booted.eval(ds.row(i), ds.y()[i], Group::Untreated, k))
        .collect::<Result<_>>()?;
    let point: Vec<(f64, f64, f64)> = split
        .treated
        .par_iter()
        .map(|&i| {
            let x = ds.row(i);
            let a = f0.eval_many(x, &y_grid, None)?;
            let b = ft.eval_many(x, &y_grid, None)?;
            Ok((conservative_pi_grid(&a, &b)?, f0.mean(x)?, ft.mean(x)?))
        })
        .collect::<Result<_>>()?;

    let mut diagnostics = NpDiagnostics::default();
    let mut unwrap = |e: &Evaluated| {
        e.w.unwrap_or_else(|| {
            diagnostics.zero_denominator += 1;
            1.0
        })
    };
    let wt: Vec<f64> = treated.iter().map(&mut unwrap).collect();
    let wu: Vec<f64> = untreated.iter().map(&mut unwrap).collect();
    let pi_star: Vec<f64> = treated
        .iter()
        .map(|e| {
            e.pi_env.unwrap_or_else(|| {
                diagnostics.zero_denominator += 1;
                0.0
            })
        })
        .collect();
    diagnostics.unbounded = pi_star.iter().filter(|&&p| p <= cfg.pi_floor).count();
    let env = |f: fn(&Evaluated) -> (f64, f64)| DensityEnvelope {
        q: cfg.q,
        b: cfg.bootstrap,
        lower: treated.iter().map(|e| f(e).0).collect(),
        upper: treated.iter().map(|e| f(e).1).collect(),
    };
    let envelopes_treated = (env(|e| e.f0), env(|e| e.ft));
    Ok(NpC2gFit {
        f0,
        ft,
        y_grid,
        envelopes_treated,
        pi_star,
        pi_star_point: point.iter().map(|p| p.0).collect(),
        w: PosteriorScores::new(split.treated, wt, ScoreSource::Nonparametric)?,
        w_untreated: PosteriorScores::new(split.untreated, wu, ScoreSource::Nonparametric)?,
        mu0: point.iter().map(|p| p.1).collect(),
        mut_: point.iter().map(|p| p.2).collect(),
        diagnostics,
        config: cfg.clone(),
    })
}

/// Conservative posterior of one `(x, y)` from fresh envelopes.
pub fn np_posterior_w(fit: &NpC2gFit, x: &[f64], y: f64, q: f64, seed: u64) -> Result<f64> {
    let b0 = BootstrapCde::new(&fit.f0, fit.config.bootstrap, seed)?;
    let bt = BootstrapCde::new(&fit.ft, fit.config.bootstrap, seed)?;
    let booted = Booted { b0: &b0, bt: &bt, grid: &fit.y_grid, q };
    // A row index past both groups excludes nothing.
    Ok(booted.eval(x, y, Group::Treated, usize::MAX)?.w.unwrap_or(1.0))
}

/// `e_k = #untreated / #treated` selections at level `a_k`, with `0/0 = 0`
/// and `c/0 = inf`.
pub fn empirical_ratio(treated: usize, untreated: usize) -> f64 {
    match (untreated, treated) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        (u, t) => u as f64 / t as f64,
    }
}

/// Treated selection at the largest grid level `a_k <= alpha` whose
/// untreated-to-treated selection ratio is at most `a_k`.
pub fn empirical_control(w_treated: &PosteriorScores, w_untreated: &PosteriorScores, alpha_grid: &[f64], alpha: f64) -> SelectionResult {
    for &a in alpha_grid.iter().rev().filter(|&&a| a <= alpha) {
        let t = select_by_average(w_treated, a);
        let u = select_by_average(w_untreated, a);
        if empirical_ratio(t.len(), u.len()) <= a {
            return t;
        }
    }
    SelectionResult::empty(alpha)
}

/// Effect interval from group means and `pi*`: the CATE `mu_t - mu_0` and
/// the extremal responder effect `(mu_t - mu_0) / pi*`, sorted. `None` when
/// `pi*` is at or below `floor`.
pub fn care_bounds(mu0: f64, mu_t: f64, pi_star: f64, floor: f64) -> Option<(f64, f64)> {
    if pi_star <= floor {
        return None;
    }
    let cate = mu_t - mu0;
    let mu1 = cate / pi_star + mu0;
    let extremal = mu1 - mu0;
    Some((cate.min(extremal), cate.max(extremal)))
}

/// Effect interval at `x`, with `pi*` from fresh envelopes.
pub fn care_interval(fit: &NpC2gFit, x: &[f64], seed: u64) -> Result<Option<(f64, f64)>> {
    let b0 = BootstrapCde::new(&fit.f0, fit.config.bootstrap, seed)?;
    let bt = BootstrapCde::new(&fit.ft, fit.config.bootstrap, seed)?;
    let (l0, _) = column_quantiles(&b0.replicates(x, &fit.y_grid, None)?, fit.config.q);
    let (_, ht) = column_quantiles(&bt.replicates(x, &fit.y_grid, None)?, fit.config.q);
    let Some(m) = min_ratio(&ht, &l0) else { return Ok(None) };
    let pi = (1.0 - m).clamp(0.0, 1.0);
    Ok(care_bounds(fit.f0.mean(x)?, fit.ft.mean(x)?, pi, fit.config.pi_floor))
}

/// Per-sample effect intervals with their population averages.
///
/// Unbounded samples carry `(-inf, inf)` and are left out of the ARE average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub indices: Vec<usize>,
    pub care_lo: Vec<f64>,
    pub care_hi: Vec<f64>,
    pub unbounded: Vec<bool>,
    /// Prior responder probability used for each sample.
    pub pi: Vec<f64>,
    pub are_lo: f64,
    pub are_hi: f64,
    pub are_excluded: usize,
    pub erpf: f64,
}

impl EstimandReport {
    pub fn from_parts(indices: Vec<usize>, care_lo: Vec<f64>, care_hi: Vec<f64>, unbounded: Vec<bool>, pi: Vec<f64>) -> Self {
        let bounded: Vec<usize> = (0..indices.len()).filter(|&k| !unbounded[k]).collect();
        let avg = |v: &[f64]| bounded.iter().map(|&k| v[k]).sum::<f64>() / bounded.len() as f64;
        let (are_lo, are_hi) = if bounded.is_empty() { (f64::NEG_INFINITY, f64::INFINITY) } else { (avg(&care_lo), avg(&care_hi)) };
        let erpf = pi.iter().sum::<f64>() / pi.len().max(1) as f64;
        Self { are_excluded: indices.len() - bounded.len(), indices, care_lo, care_hi, unbounded, pi, are_lo, are_hi, erpf }
    }

    pub fn are_interval(&self) -> (f64, f64) {
        (self.are_lo, self.are_hi)
    }

    /// Report over the samples whose dataset row is set in `mask`.
    pub fn restrict(&self, mask: &[bool]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.indices.len()).filter(|&k| mask.get(self.indices[k]).copied().unwrap_or(false)).collect();
        if keep.is_empty() {
            return Err(Error::InvalidInput("subgroup contains no treated samples".into()));
        }
        let pick = |v: &[f64]| keep.iter().map(|&k| v[k]).collect::<Vec<_>>();
        Ok(Self::from_parts(
            keep.iter().map(|&k| self.indices[k]).collect(),
            pick(&self.care_lo),
            pick(&self.care_hi),
            keep.iter().map(|&k| self.unbounded[k]).collect(),
            pick(&self.pi),
        ))
    }
}

fn report_from_means(indices: Vec<usize>, mu0: &[f64], mu_t: &[f64], pi_star: &[f64], floor: f64) -> EstimandReport {
    let n = indices.len();
    let (mut lo, mut hi, mut unb) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        match care_bounds(mu0[k], mu_t[k], pi_star[k], floor) {
            Some((a, b)) => {
                lo.push(a);
                hi.push(b);
                unb.push(false);
            }
            None => {
                lo.push(f64::NEG_INFINITY);
                hi.push(f64::INFINITY);
                unb.push(true);
            }
        }
    }
    EstimandReport::from_parts(indices, lo, hi, unb, pi_star.to_vec())
}

/// Effect intervals and ERPF over the treated samples, optionally restricted
/// to the dataset rows set in `subgroup`.
pub fn np_estimands(fit: &NpC2gFit, subgroup: Option<&[bool]>) -> Result<EstimandReport> {
    let r = report_from_means(fit.w.indices().to_vec(), &fit.mu0, &fit.mut_, &fit.pi_star, fit.config.pi_floor);
    match subgroup {
        Some(mask) => r.restrict(mask),
        None => Ok(r),
    }
}

/// Grid for minimizing a ratio of analytic densities.
fn analytic_grid(s: &crate::simgen::SampleTruth) -> Vec<f64> {
    let spans = [s.untreated.span(), s.nonresponder.span(), s.responder.span()];
    let lo = spans.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let hi = spans.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    linspace(lo, hi, 4001)
}

/// `pi*` from the true untreated and treated densities of sample `i`.
///
/// Equal-variance normal laws have the closed form `pi` (or 0 when the
/// responder mean equals the untreated mean); other laws are minimized on a
/// fine grid over their supports.
pub fn oracle_pi_star(truth: &GeneratorTruth, i: usize) -> Result<f64> {
    let s = truth.sample(i)?;
    if let (Dist::Normal { mean: m0, sd: s0 }, Dist::Normal { mean: mn, sd: sn }, Dist::Normal { mean: m1, sd: s1 }) =
        (s.untreated, s.nonresponder, s.responder)
    {
        if m0 == mn && s0 == sn && s0 == s1 {
            return Ok(if m1 == m0 { 0.0 } else { s.pi });
        }
    }
    let grid = analytic_grid(s);
    let f0: Vec<f64> = grid.iter().map(|&y| s.untreated.pdf(y)).collect();
    let ft: Vec<f64> = grid.iter().map(|&y| s.treated_pdf(y)).collect();
    conservative_pi_grid(&f0, &ft)
}

/// `(1 - pi*) f_0(y) / f_t(y)` with the true densities of sample `i`,
/// clamped to `[0, 1]`; 1 where `f_t` vanishes.
pub fn np_oracle_posterior(truth: &GeneratorTruth, i: usize, y: f64) -> Result<f64> {
    let pi = oracle_pi_star(truth, i)?;
    let s = truth.sample(i)?;
    let ft = s.treated_pdf(y);
    if !(ft > 0.0) {
        return Ok(1.0);
    }
    Ok(((1.0 - pi) * s.untreated.pdf(y) / ft).clamp(0.0, 1.0))
}

/// Oracle posteriors of every treated sample.
pub fn np_oracle_scores(truth: &GeneratorTruth, ds: &Dataset) -> Result<PosteriorScores> {
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i]).collect();
    let w = idx.iter().map(|&i| np_oracle_posterior(truth, i, ds.y()[i])).collect::<Result<Vec<_>>>()?;
    PosteriorScores::new(idx, w, ScoreSource::Oracle)
}

/// Effect intervals from the true densities.
pub fn oracle_estimands(truth: &GeneratorTruth, ds: &Dataset) -> Result<EstimandReport> {
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i]).collect();
    let mut mu0 = Vec::with_capacity(idx.len());
    let mut mut_ = Vec::with_capacity(idx.len());
    let mut pi = Vec::with_capacity(idx.len());
    for &i in &idx {
        let s = truth.sample(i)?;
        mu0.push(s.untreated.mean());
        mut_.push((1.0 - s.pi) * s.nonresponder.mean() + s.pi * s.responder.mean());
        pi.push(oracle_pi_star(truth, i)?);
    }
    Ok(report_from_means(idx, &mu0, &mut_, &pi, 1e-3))
}
