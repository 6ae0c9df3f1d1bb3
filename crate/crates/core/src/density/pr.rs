//! Predictive recursion for a location mixture of normals
//! `g(y) = int N(y | theta, h^2) m(theta) d theta`, with bandwidth chosen by the
//! predictive recursion marginal likelihood (PRML).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{normal_pdf, INV_SQRT_2PI};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PrConfig {
    pub grid_size: usize,
    pub weight_exponent: f64,
    pub permutations: usize,
}

impl Default for PrConfig {
    fn default() -> Self {
        Self { grid_size: 512, weight_exponent: 0.67, permutations: 10 }
    }
}

/// Mixing density on an equally spaced support grid, plus the induced
/// density `g` tabulated on the grid widened by six bandwidths each side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrDensity {
    grid: Vec<f64>,
    mixing: Vec<f64>,
    kernel_bandwidth: f64,
    prml: f64,
    table_start: f64,
    table_step: f64,
    table: Vec<f64>,
}

fn trapezoid_weights(n: usize, step: f64) -> Vec<f64> {
    let mut w = vec![step; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

impl PrDensity {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    pub fn kernel_bandwidth(&self) -> f64 {
        self.kernel_bandwidth
    }

    /// Average log marginal likelihood over the orderings used in the fit.
    pub fn prml(&self) -> f64 {
        self.prml
    }

    /// Trapezoid integral of the mixing density over its grid.
    pub fn mixing_mass(&self) -> f64 {
        let step = self.grid[1] - self.grid[0];
        trapezoid_weights(self.grid.len(), step)
            .iter()
            .zip(&self.mixing)
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Exact convolution `int N(y | theta, h^2) m(theta) d theta` by the
    /// trapezoid rule on the support grid.
    pub fn density_exact(&self, y: f64) -> f64 {
        let step = self.grid[1] - self.grid[0];
        let w = trapezoid_weights(self.grid.len(), step);
        self.grid
            .iter()
            .zip(&self.mixing)
            .zip(&w)
            .map(|((t, m), w)| w * m * normal_pdf(y, *t, self.kernel_bandwidth))
            .sum()
    }

    fn table_end(&self) -> f64 {
        self.table_start + self.table_step * (self.table.len() - 1) as f64
    }

    /// Tabulation range of `g`; outside it the density decays like a normal
    /// kernel from the boundary value.
    pub fn support(&self) -> (f64, f64) {
        (self.table_start, self.table_end())
    }

    /// `(log g(y), d/dy log g(y))` from the linear interpolant of the table.
    pub fn log_density_and_slope(&self, y: f64) -> (f64, f64) {
        const FLOOR: f64 = 1e-300;
        let h2 = self.kernel_bandwidth * self.kernel_bandwidth;
        let end = self.table_end();
        if y < self.table_start {
            let dist = self.table_start - y;
            return (self.table[0].max(FLOOR).ln() - 0.5 * dist * dist / h2, dist / h2);
        }
        if y > end {
            let dist = y - end;
            let last = *self.table.last().expect("non-empty table");
            return (last.max(FLOOR).ln() - 0.5 * dist * dist / h2, -dist / h2);
        }
        let pos = (y - self.table_start) / self.table_step;
        let j = (pos.floor() as usize).min(self.table.len() - 2);
        let frac = pos - j as f64;
        let (a, b) = (self.table[j], self.table[j + 1]);
        let v = (a + (b - a) * frac).max(FLOOR);
        (v.ln(), (b - a) / self.table_step / v)
    }

    pub fn log_density(&self, y: f64) -> f64 {
        self.log_density_and_slope(y).0
    }

    /// Density by linear interpolation of the tabulated convolution.
    pub fn density(&self, y: f64) -> f64 {
        let (start, end) = self.support();
        if (start..=end).contains(&y) {
            let pos = (y - self.table_start) / self.table_step;
            let j = (pos.floor() as usize).min(self.table.len() - 2);
            let frac = pos - j as f64;
            self.table[j] + (self.table[j + 1] - self.table[j]) * frac
        } else {
            self.log_density(y).exp()
        }
    }
}

fn validate(residuals: &[f64], h: f64, config: &PrConfig) -> Result<()> {
    if residuals.len() < 2 {
        return Err(Error::InvalidInput("predictive recursion needs at least two residuals".into()));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    if !(config.weight_exponent > 0.5 && config.weight_exponent <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "weight exponent must lie in (0.5, 1], got {}",
            config.weight_exponent
        )));
    }
    if config.grid_size < 2 || config.permutations == 0 {
        return Err(Error::InvalidInput("grid size must be >= 2 and permutations >= 1".into()));
    }
    Ok(())
}

/// Runs predictive recursion over `config.permutations` seeded orderings of
/// the residuals and averages the resulting mixing densities.
pub fn predictive_recursion(residuals: &[f64], h: f64, config: &PrConfig, seed: u64) -> Result<PrDensity> {
    validate(residuals, h, config)?;
    let n = residuals.len();
    let lo = residuals.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let g = config.grid_size;
    let step = (hi - lo) / (g - 1) as f64;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Degenerate("predictive recursion grid collapsed".into()));
    }
    let grid: Vec<f64> = (0..g).map(|k| lo + step * k as f64).collect();
    let tw = trapezoid_weights(g, step);

    // Likelihood rows N(y_i | theta_k, h^2), shared by all orderings.
    let lik: Vec<Vec<f64>> = residuals
        .iter()
        .map(|&y| grid.iter().map(|&t| normal_pdf(y, t, h)).collect())
        .collect();

    let mut rng = rng::stream(seed, rng::streams::PR_PERMUTATIONS);
    let mut order: Vec<usize> = (0..n).collect();
    let mut mixing_sum = vec![0.0; g];
    let mut log_ml_sum = 0.0;
    let mut f = vec![0.0; g];
    for _ in 0..config.permutations {
        order.shuffle(&mut rng);
        f.iter_mut().for_each(|v| *v = 1.0 / (hi - lo));
        let mut log_ml = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            let gamma = ((i + 2) as f64).powf(-config.weight_exponent);
            let row = &lik[idx];
            let marginal: f64 = (0..g).map(|k| tw[k] * row[k] * f[k]).sum();
            if !(marginal > 0.0) {
                return Err(Error::Degenerate("predictive recursion marginal underflowed".into()));
            }
            log_ml += marginal.ln();
            let scale = gamma / marginal;
            for k in 0..g {
                f[k] *= (1.0 - gamma) + scale * row[k];
            }
        }
        log_ml_sum += log_ml;
        for k in 0..g {
            mixing_sum[k] += f[k];
        }
    }
    let p = config.permutations as f64;
    let mixing: Vec<f64> = mixing_sum.iter().map(|v| v / p).collect();

    let extra = (6.0 * h / step).ceil() as usize;
    let table_start = lo - extra as f64 * step;
    let table: Vec<f64> = (0..g + 2 * extra)
        .map(|j| {
            let y = table_start + step * j as f64;
            let inv = 1.0 / h;
            (0..g)
                .map(|k| {
                    let z = (y - grid[k]) * inv;
                    tw[k] * mixing[k] * INV_SQRT_2PI * inv * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect();

    Ok(PrDensity {
        grid,
        mixing,
        kernel_bandwidth: h,
        prml: log_ml_sum / p,
        table_start,
        table_step: step,
        table,
    })
}

/// Candidate bandwidths `sd * {0.1, 0.2, 0.3, 0.5, 0.75, 1}` of the residuals.
pub fn default_pr_bandwidths(residuals: &[f64]) -> Vec<f64> {
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    [0.1, 0.2, 0.3, 0.5, 0.75, 1.0].iter().map(|s| s * sd).collect()
}

/// Fits every candidate and returns the fit with the largest PRML; ties go to
/// the smaller bandwidth.
pub fn fit_prml(residuals: &[f64], candidates: &[f64], config: &PrConfig, seed: u64) -> Result<PrDensity> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate bandwidths".into()));
    }
    let fits = candidates
        .iter()
        .map(|&h| predictive_recursion(residuals, h, config, seed))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(f64, f64)> = fits.iter().map(|f| (f.kernel_bandwidth, f.prml)).collect();
    let best = best_by_prml(&scored).expect("non-empty candidates");
    Ok(fits.into_iter().nth(best).expect("index in range"))
}

/// Index of the `(bandwidth, prml)` pair with the largest PRML, preferring
/// the smaller bandwidth on ties.
fn best_by_prml(scored: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(h, p)) in scored.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bh, bp) = scored[b];
                p > bp || (p == bp && h < bh)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn prml_select_bandwidth(residuals: &[f64], candidates: &[f64], config: &PrConfig, seed: u64) -> Result<f64> {
    Ok(fit_prml(residuals, candidates, config, seed)?.kernel_bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn normal_draws(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 77);
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
        let step = (b - a) / m as f64;
        (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                w * f(a + step * i as f64)
            })
            .sum::<f64>()
            * step
    }

    fn mass(fit: &PrDensity) -> f64 {
        let (lo, hi) = fit.support();
        let h = fit.kernel_bandwidth();
        trapezoid(|y| fit.density(y), lo - 6.0 * h, hi + 6.0 * h, 40_000)
    }

    #[test]
    fn normalization_is_preserved() {
        let cfg = PrConfig::default();
        for (res, h) in [
            (vec![0.1, -0.4, 2.0, 0.3], 0.3),
            (vec![5.0, 5.0], 1.0),
            (normal_draws(200, 1), 0.5),
        ] {
            let fit = predictive_recursion(&res, h, &cfg, 3).unwrap();
            assert!((fit.mixing_mass() - 1.0).abs() < 1e-6);
            assert!((mass(&fit) - 1.0).abs() < 1e-6, "{}", mass(&fit));
            assert!(fit.mixing().iter().all(|m| *m >= 0.0));
        }
    }

    #[test]
    fn interpolated_density_tracks_exact_convolution() {
        let fit = predictive_recursion(&normal_draws(300, 2), 0.4, &PrConfig::default(), 1).unwrap();
        for y in [-2.0, -0.5, 0.0, 0.7, 1.9] {
            let (a, b) = (fit.density(y), fit.density_exact(y));
            assert!((a - b).abs() < 1e-3 * b.max(1e-3), "{a} vs {b}");
        }
        // Continuous across the table boundary.
        let (lo, _) = fit.support();
        assert!((fit.density(lo - 1e-9) - fit.density(lo + 1e-9)).abs() < 1e-9);
    }

    #[test]
    fn recovers_standard_normal() {
        let draws = normal_draws(5000, 3);
        let fit = predictive_recursion(&draws, 0.3, &PrConfig::default(), 5).unwrap();
        let truth = Normal::new(0.0, 1.0).unwrap();
        let (lo, hi) = fit.support();
        let m = 20_000;
        let step = (hi - lo) / m as f64;
        let mut cdf = 0.0;
        let mut ks: f64 = 0.0;
        let mut prev = fit.density(lo);
        for i in 1..=m {
            let y = lo + step * i as f64;
            let cur = fit.density(y);
            cdf += 0.5 * (prev + cur) * step;
            prev = cur;
            ks = ks.max((cdf - truth.cdf(y)).abs());
        }
        assert!(ks < 0.03, "KS distance {ks}");
    }

    #[test]
    fn deterministic_given_seed() {
        let res = normal_draws(50, 4);
        let cfg = PrConfig { permutations: 1, ..PrConfig::default() };
        let a = predictive_recursion(&res, 0.5, &cfg, 9).unwrap();
        let b = predictive_recursion(&res, 0.5, &cfg, 9).unwrap();
        assert_eq!(a.mixing(), b.mixing());
        assert_eq!(a.prml(), b.prml());
    }

    #[test]
    fn rejects_bad_configuration() {
        let cfg = PrConfig::default();
        assert!(predictive_recursion(&[1.0], 0.3, &cfg, 0).is_err());
        assert!(predictive_recursion(&[1.0, 2.0], 0.0, &cfg, 0).is_err());
        let bad = PrConfig { weight_exponent: 0.5, ..cfg.clone() };
        assert!(predictive_recursion(&[1.0, 2.0], 0.3, &bad, 0).is_err());
        assert!(prml_select_bandwidth(&[1.0, 2.0], &[], &cfg, 0).is_err());
    }

    #[test]
    fn prml_selection_examples() {
        let cfg = PrConfig::default();
        let res = normal_draws(400, 6);
        assert_eq!(prml_select_bandwidth(&res, &[0.42], &cfg, 0).unwrap(), 0.42);

        let cands = [0.05, 0.3, 3.0];
        let prmls: Vec<f64> = cands
            .iter()
            .map(|&h| predictive_recursion(&res, h, &cfg, 0).unwrap().prml())
            .collect();
        let best = fit_prml(&res, &cands, &cfg, 0).unwrap();
        let max = prmls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.prml(), max);
    }

    #[test]
    fn prml_tie_prefers_smaller_bandwidth() {
        assert_eq!(best_by_prml(&[(0.5, -3.0), (0.2, -3.0), (0.9, -4.0)]), Some(1));
        assert_eq!(best_by_prml(&[(0.5, -3.0), (0.9, -2.0)]), Some(1));
        assert_eq!(best_by_prml(&[]), None);
    }
}
