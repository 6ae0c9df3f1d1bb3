//! k-nearest-neighbour Rosenblatt conditional density estimator
//!
//! ```text
//! f(y | x) = sum_i K_h1(x | x_ji) K_h2(y | y_ji) / sum_i K_h1(x | x_ji)
//! ```
//!
//! over the `k` nearest reference rows `j_1..j_k` of `x`, with normal kernels.
//! Covariate weights are computed relative to the nearest neighbour so the
//! normalising constant of `K_h1` cancels and the weights never all underflow.

use serde::{Deserialize, Serialize};

use super::{normal_log_pdf, normal_pdf};
use crate::error::{Error, Result};
use crate::kernel::{median_heuristic, sq_dist};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdeModel {
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    treated: bool,
    h1: f64,
    h2: f64,
    k: usize,
}

/// Tuning grid for [`cde_tune`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdeGrid {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub k: Vec<usize>,
}

impl CdeGrid {
    /// `k in {5, 10, 20, 40, 80}`, `h1` = median pairwise covariate distance
    /// times `{1/16, 1/8, 1/4, 1/2, 1}`, `h2` = robust outcome scale
    /// (`1.4826 * MAD`) times `{0.02, 0.05, 0.1, 0.2, 0.35, 0.5}`.
    pub fn default_for(x: &[f64], d: usize, y: &[f64]) -> Self {
        let med = median_heuristic(x, d);
        let sd = robust_scale(y);
        Self {
            h1: [0.0625, 0.125, 0.25, 0.5, 1.0].iter().map(|s| s * med).collect(),
            h2: [0.02, 0.05, 0.1, 0.2, 0.35, 0.5].iter().map(|s| s * sd).collect(),
            k: vec![5, 10, 20, 40, 80],
        }
    }
}

/// `1.4826 * MAD`, falling back to the standard deviation and then to 1 when
/// the spread is zero.
pub fn robust_scale(y: &[f64]) -> f64 {
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    let m = median(&mut y.to_vec());
    let mad = 1.4826 * median(&mut y.iter().map(|v| (v - m).abs()).collect());
    if mad > 0.0 {
        return mad;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if sd > 0.0 { sd } else { 1.0 }
}

/// A neighbour of a query: reference row and squared distance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Neighbor {
    pub row: usize,
    pub sq_dist: f64,
}

impl CdeModel {
    /// Reference rows `x` (row-major, dimension `d`) and outcomes `y` of one
    /// treatment group.
    pub fn new(x: Vec<f64>, d: usize, y: Vec<f64>, treated: bool, h1: f64, h2: f64, k: usize) -> Result<Self> {
        if d == 0 || y.is_empty() || x.len() != y.len() * d {
            return Err(Error::InvalidInput("reference data shape mismatch".into()));
        }
        if !(h1 > 0.0 && h2 > 0.0) {
            return Err(Error::InvalidInput(format!("bandwidths must be positive, got h1={h1}, h2={h2}")));
        }
        if k == 0 || k > y.len() {
            return Err(Error::InvalidInput(format!(
                "neighbour count {k} outside 1..={}",
                y.len()
            )));
        }
        Ok(Self { x, y, d, treated, h1, h2, k })
    }

    pub fn h1(&self) -> f64 {
        self.h1
    }

    pub fn h2(&self) -> f64 {
        self.h2
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn treated(&self) -> bool {
        self.treated
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Same reference data with different hyperparameters.
    pub fn with_params(&self, h1: f64, h2: f64, k: usize) -> Result<Self> {
        Self::new(self.x.clone(), self.d, self.y.clone(), self.treated, h1, h2, k)
    }

    /// All reference rows except `exclude`, ordered by distance to `x` with
    /// ties broken by row index.
    pub(crate) fn sorted_neighbors(&self, x: &[f64], exclude: Option<usize>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = (0..self.n())
            .filter(|&j| Some(j) != exclude)
            .map(|j| Neighbor { row: j, sq_dist: sq_dist(x, self.row(j)) })
            .collect();
        all.sort_by(|a, b| a.sq_dist.total_cmp(&b.sq_dist).then(a.row.cmp(&b.row)));
        all
    }

    fn nearest(&self, x: &[f64], exclude: Option<usize>, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = (0..self.n())
            .filter(|&j| Some(j) != exclude)
            .map(|j| Neighbor { row: j, sq_dist: sq_dist(x, self.row(j)) })
            .collect();
        let cmp = |a: &Neighbor, b: &Neighbor| a.sq_dist.total_cmp(&b.sq_dist).then(a.row.cmp(&b.row));
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable_by(k, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        all
    }

    /// Normalised covariate weights of the `k` nearest rows.
    fn weights(&self, x: &[f64], exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        if x.len() != self.d {
            return Err(Error::InvalidInput(format!("query has dimension {}, expected {}", x.len(), self.d)));
        }
        let nb = self.nearest(x, exclude, self.k);
        if nb.is_empty() {
            return Err(Error::ZeroDenominator(format!("{x:?} (no reference rows)")));
        }
        let inv = 1.0 / (2.0 * self.h1 * self.h1);
        let base = nb[0].sq_dist;
        let raw: Vec<f64> = nb.iter().map(|n| (-(n.sq_dist - base) * inv).exp()).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::ZeroDenominator(format!("{x:?}")));
        }
        Ok(nb.iter().zip(raw).map(|(n, w)| (n.row, w / total)).collect())
    }

    pub fn eval(&self, x: &[f64], y: f64) -> Result<f64> {
        self.eval_excluding(x, y, None)
    }

    /// Density with reference row `exclude` removed (leave-one-out).
    pub fn eval_excluding(&self, x: &[f64], y: f64, exclude: Option<usize>) -> Result<f64> {
        Ok(self
            .weights(x, exclude)?
            .iter()
            .map(|&(j, w)| w * normal_pdf(y, self.y[j], self.h2))
            .sum())
    }

    /// Conditional mean `sum_i w_i y_ji`, the exact first moment of the
    /// estimated density.
    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        Ok(self.weights(x, None)?.iter().map(|&(j, w)| w * self.y[j]).sum())
    }

    /// Densities at many outcome values for one covariate query.
    pub fn eval_many(&self, x: &[f64], ys: &[f64], exclude: Option<usize>) -> Result<Vec<f64>> {
        let w = self.weights(x, exclude)?;
        Ok(ys
            .iter()
            .map(|&y| w.iter().map(|&(j, wj)| wj * normal_pdf(y, self.y[j], self.h2)).sum())
            .collect())
    }

    /// Mean leave-one-out log density `(1/n) sum_i log f_{-i}(y_i | x_i)`.
    pub fn loo_objective(&self) -> f64 {
        let kmax = self.k.min(self.n() - 1);
        let mut total = 0.0;
        for i in 0..self.n() {
            let nb = self.nearest(self.row(i), Some(i), kmax);
            total += loo_term(&nb, &self.y, self.y[i], self.h1, self.h2, kmax);
        }
        total / self.n() as f64
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// `log f_{-i}(y_i | x_i)` from the first `k` entries of a sorted neighbour
/// list that already excludes row `i`.
fn loo_term(nb: &[Neighbor], y: &[f64], yi: f64, h1: f64, h2: f64, k: usize) -> f64 {
    let nb = &nb[..k.min(nb.len())];
    let inv = 1.0 / (2.0 * h1 * h1);
    let base = nb[0].sq_dist;
    let lw = nb.iter().map(|n| -(n.sq_dist - base) * inv);
    let denom = log_sum_exp(lw.clone());
    let num = log_sum_exp(lw.zip(nb.iter()).map(|(l, n)| l + normal_log_pdf(yi, y[n.row], h2)));
    num - denom
}

pub fn cde_eval(model: &CdeModel, x: &[f64], y: f64) -> Result<f64> {
    model.eval(x, y)
}

/// Chooses `(h1, h2, k)` maximising the mean leave-one-out log density. Ties
/// go to the smaller `k`, then the smaller `h1`, then the smaller `h2`.
/// Neighbour counts above `n - 1` are skipped.
pub fn cde_tune(x: &[f64], d: usize, y: &[f64], treated: bool, grid: &CdeGrid) -> Result<CdeModel> {
    let n = y.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("conditional density tuning needs >= 3 rows, got {n}")));
    }
    if d == 0 || x.len() != n * d {
        return Err(Error::InvalidInput("reference data shape mismatch".into()));
    }
    let mut ks: Vec<usize> = grid.k.iter().copied().filter(|&k| k >= 1 && k < n).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut h1s = grid.h1.clone();
    h1s.sort_by(|a, b| a.total_cmp(b));
    let mut h2s = grid.h2.clone();
    h2s.sort_by(|a, b| a.total_cmp(b));
    if ks.is_empty() || h1s.is_empty() || h2s.is_empty() {
        return Err(Error::InvalidInput("empty conditional density grid (after k < n filter)".into()));
    }
    if h1s.iter().chain(&h2s).any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidInput("bandwidths must be positive".into()));
    }
    let kmax = *ks.last().expect("non-empty");
    let probe = CdeModel::new(x.to_vec(), d, y.to_vec(), treated, h1s[0], h2s[0], 1)?;
    let neighbors: Vec<Vec<Neighbor>> = (0..n).map(|i| probe.nearest(probe.row(i), Some(i), kmax)).collect();

    let mut best: Option<(f64, f64, f64, usize)> = None;
    for &k in &ks {
        for &h1 in &h1s {
            for &h2 in &h2s {
                let obj: f64 = (0..n).map(|i| loo_term(&neighbors[i], y, y[i], h1, h2, k)).sum::<f64>() / n as f64;
                if obj.is_nan() || obj == f64::NEG_INFINITY {
                    continue;
                }
                if best.is_none_or(|(b, ..)| obj > b) {
                    best = Some((obj, h1, h2, k));
                }
            }
        }
    }
    let (_, h1, h2, k) = best.ok_or_else(|| Error::NoFiniteCandidate("every LOO objective is -inf".into()))?;
    probe.with_params(h1, h2, k)
}
