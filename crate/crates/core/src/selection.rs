//! Selection rules and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::density::CdeModel;
use crate::error::{Error, Result};

/// Which estimator produced a set of null posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Additive,
    Nonparametric,
    Oracle,
    Frequentist,
}

/// Null posterior `w_i` for each treated sample, keyed by dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorScores {
    indices: Vec<usize>,
    w: Vec<f64>,
    source: ScoreSource,
}

impl PosteriorScores {
    pub fn new(indices: Vec<usize>, w: Vec<f64>, source: ScoreSource) -> Result<Self> {
        if indices.len() != w.len() {
            return Err(Error::InvalidInput(format!(
                "{} indices but {} posterior values",
                indices.len(),
                w.len()
            )));
        }
        if let Some(i) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("posterior value {} at position {i} outside [0, 1]", w[i])));
        }
        Ok(Self { indices, w, source })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn source(&self) -> ScoreSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected dataset rows, ascending.
    pub selected: Vec<usize>,
    pub level: f64,
    /// Mean posterior of the selected samples, 0 for an empty selection.
    pub estimated_fdr: f64,
}

impl SelectionResult {
    pub fn empty(level: f64) -> Self {
        Self { selected: Vec::new(), level, estimated_fdr: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Largest set whose mean posterior is at most `alpha`: the longest prefix
/// of the scores sorted ascending, ties broken by row index.
pub fn select_by_average(scores: &PosteriorScores, alpha: f64) -> SelectionResult {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.w[a].total_cmp(&scores.w[b]).then(scores.indices[a].cmp(&scores.indices[b])));
    let mut sum = 0.0;
    let mut best = (0, 0.0);
    for (k, &pos) in order.iter().enumerate() {
        sum += scores.w[pos];
        let count = (k + 1) as f64;
        if sum <= alpha * count {
            best = (k + 1, sum / count);
        }
    }
    let mut selected: Vec<usize> = order[..best.0].iter().map(|&p| scores.indices[p]).collect();
    selected.sort_unstable();
    SelectionResult { selected, level: alpha, estimated_fdr: best.1 }
}

/// Benjamini-Hochberg step-up. Returns positions into `pvalues`, ascending.
pub fn bh_procedure(pvalues: &[f64], alpha: f64) -> Vec<usize> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let cutoff = (1..=m).rev().find(|&i| pvalues[order[i - 1]] <= i as f64 * alpha / m as f64).unwrap_or(0);
    let mut out = order[..cutoff].to_vec();
    out.sort_unstable();
    out
}

/// Density-level p-values `Pr[f0(Y|x) <= f0(y|x)]` for `Y ~ f0(.|x)`, by
/// trapezoid quadrature on a grid of spacing `h2 / 10` covering the reference
/// outcomes plus 8 bandwidths on each side.
pub fn frequentist_pvalues(f0: &CdeModel, points: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    let h2 = f0.h2();
    let lo = f0.y().iter().copied().fold(f64::INFINITY, f64::min) - 8.0 * h2;
    let hi = f0.y().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 8.0 * h2;
    let size = (((hi - lo) / (h2 / 10.0)).ceil() as usize + 1).max(2001);
    let step = (hi - lo) / (size - 1) as f64;
    let grid: Vec<f64> = (0..size).map(|i| lo + step * i as f64).collect();
    points
        .iter()
        .map(|(x, y)| {
            let dens = f0.eval_many(x, &grid, None)?;
            let fy = f0.eval(x, *y)?;
            let mut total = 0.0;
            let mut below = 0.0;
            for (i, &f) in dens.iter().enumerate() {
                let wt = if i == 0 || i + 1 == size { 0.5 * step } else { step };
                total += wt * f;
                if f <= fy {
                    below += wt * f;
                }
            }
            if (total - 1.0).abs() > 1e-3 {
                return Err(Error::Quadrature { mass: total });
            }
            Ok((below / total).clamp(0.0, 1.0))
        })
        .collect()
}

/// False discovery proportion: selected non-responders over `max(1, |S|)`.
pub fn fdp(selected: &[usize], h: &[bool]) -> f64 {
    let nulls = selected.iter().filter(|&&i| !h[i]).count();
    nulls as f64 / selected.len().max(1) as f64
}

/// Selected responders over all responders; `None` without responders.
pub fn power(selected: &[usize], h: &[bool]) -> Option<f64> {
    let total = h.iter().filter(|&&v| v).count();
    if total == 0 {
        return None;
    }
    Some(selected.iter().filter(|&&i| h[i]).count() as f64 / total as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Normal-approximation 95% half-width `1.96 s / sqrt(n)` with the sample
/// standard deviation; 0 for fewer than two values.
pub fn ci95_halfwidth(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * (var / n as f64).sqrt()
}

/// Mean power, or 0 when the FDR lower confidence bound lies strictly above
/// `alpha`.
pub fn valid_power(mean_fdr: f64, halfwidth: f64, mean_power: f64, alpha: f64) -> f64 {
    if mean_fdr - halfwidth > alpha {
        0.0
    } else {
        mean_power
    }
}

/// Pointwise [`valid_power`] along curves indexed by the same alpha grid.
pub fn valid_power_curve(fdr: &[f64], power: &[f64], halfwidths: &[f64], alphas: &[f64]) -> Vec<f64> {
    fdr.iter()
        .zip(power)
        .zip(halfwidths.iter().zip(alphas))
        .map(|((&f, &p), (&h, &a))| valid_power(f, h, p, a))
        .collect()
}

/// Union of closed intervals as sorted disjoint pieces.
fn merge(intervals: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = intervals.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in v {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

fn measure(v: &[(f64, f64)]) -> f64 {
    v.iter().map(|(a, b)| b - a).sum()
}

/// Lebesgue Jaccard index of two finite unions of intervals; 1 when both
/// unions have measure zero.
pub fn jaccard_intervals(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let ma = merge(a);
    let mb = merge(b);
    let (mut i, mut j) = (0, 0);
    let mut inter = 0.0;
    while i < ma.len() && j < mb.len() {
        let lo = ma[i].0.max(mb[j].0);
        let hi = ma[i].1.min(mb[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if ma[i].1 < mb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = measure(&ma) + measure(&mb) - inter;
    if union <= 0.0 {
        1.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
