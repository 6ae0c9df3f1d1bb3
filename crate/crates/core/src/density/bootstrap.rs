//! Bootstrap envelopes for the conditional density estimator.
//!
//! Each replicate resamples the reference rows of one group with replacement
//! and keeps the tuned hyperparameters. A replicate is stored as a vector of
//! row multiplicities, so the k nearest neighbours of a query in a replicate
//! are found by walking the full-data distance order once.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cde::CdeModel;
use super::normal_pdf;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, streams};

/// Order statistic at 1-based index `ceil(p * B)`, clamped to `1..=B`.
pub fn empirical_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    quantile_in_place(&mut v, p)
}

pub(crate) fn quantile_index(b: usize, p: f64) -> usize {
    let raw = (p * b as f64 - 1e-9 * b as f64).ceil();
    (raw.max(1.0) as usize).min(b) - 1
}

fn quantile_in_place(v: &mut [f64], p: f64) -> f64 {
    assert!(!v.is_empty(), "quantile of empty sample");
    let idx = quantile_index(v.len(), p);
    let (_, val, _) = v.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *val
}

/// Lower (`q`) and upper (`1 - q`) quantiles of the replicate densities, one
/// entry per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEnvelope {
    pub q: f64,
    pub b: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BootstrapCde {
    model: CdeModel,
    counts: Vec<Vec<u32>>,
}

fn validate(b: usize, q: f64) -> Result<()> {
    if b == 0 {
        return Err(Error::InvalidInput("bootstrap replicate count must be >= 1".into()));
    }
    if !(q > 0.0 && q <= 0.5) {
        return Err(Error::InvalidInput(format!("quantile level must lie in (0, 0.5], got {q}")));
    }
    Ok(())
}

impl BootstrapCde {
    /// Draws `b` resamples of the model's reference rows. Replicate `r` uses
    /// its own stream derived from `seed`, the group label and `r`.
    pub fn new(model: &CdeModel, b: usize, seed: u64) -> Result<Self> {
        validate(b, 0.5)?;
        let label = if model.treated() { streams::BOOTSTRAP_TREATED } else { streams::BOOTSTRAP_UNTREATED };
        let group_seed = derive_seed(seed, label);
        let n = model.n();
        let counts = (0..b)
            .map(|r| {
                let mut rng = stream(group_seed, r as u64);
                let mut c = vec![0u32; n];
                for _ in 0..n {
                    c[rng.random_range(0..n)] += 1;
                }
                c
            })
            .collect();
        Ok(Self { model: model.clone(), counts })
    }

    pub fn b(&self) -> usize {
        self.counts.len()
    }

    pub fn model(&self) -> &CdeModel {
        &self.model
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    /// Replicate densities at `(x, y)` for every `y` in `ys`, as a `B x |ys|`
    /// matrix. Row `exclude` of the reference data, if any, is dropped from
    /// every replicate. A replicate left without rows yields zero density.
    pub fn replicates(&self, x: &[f64], ys: &[f64], exclude: Option<usize>) -> Result<DMatrix<f64>> {
        if x.len() != self.model.d() {
            return Err(Error::InvalidInput(format!(
                "query has dimension {}, expected {}",
                x.len(),
                self.model.d()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ZeroDenominator(format!("{x:?}")));
        }
        let order = self.model.sorted_neighbors(x, exclude);
        let k = self.model.k() as u32;
        let inv = 1.0 / (2.0 * self.model.h1() * self.model.h1());
        let b = self.b();

        // Column of each used reference row in the weight matrix.
        let mut slot = vec![usize::MAX; self.model.n()];
        let mut used: Vec<usize> = Vec::new();
        let mut entries: Vec<Vec<(usize, f64)>> = Vec::with_capacity(b);
        for counts in &self.counts {
            let mut taken = 0u32;
            let mut row_entries = Vec::new();
            let mut base = None;
            for nb in &order {
                if taken == k {
                    break;
                }
                let c = counts[nb.row];
                if c == 0 {
                    continue;
                }
                let m = c.min(k - taken);
                taken += m;
                let base = *base.get_or_insert(nb.sq_dist);
                let w = m as f64 * (-(nb.sq_dist - base) * inv).exp();
                if slot[nb.row] == usize::MAX {
                    slot[nb.row] = used.len();
                    used.push(nb.row);
                }
                row_entries.push((slot[nb.row], w));
            }
            let total: f64 = row_entries.iter().map(|e| e.1).sum();
            if total > 0.0 {
                row_entries.iter_mut().for_each(|e| e.1 /= total);
            }
            entries.push(row_entries);
        }

        let mut w = DMatrix::<f64>::zeros(b, used.len());
        for (r, row) in entries.iter().enumerate() {
            for &(c, v) in row {
                w[(r, c)] += v;
            }
        }
        let h2 = self.model.h2();
        let ref_y = self.model.y();
        let ky = DMatrix::from_fn(used.len(), ys.len(), |u, g| normal_pdf(ys[g], ref_y[used[u]], h2));
        Ok(w * ky)
    }

    /// Quantile envelope at `(x, y)` for each `y` in `ys`.
    pub fn envelope(&self, x: &[f64], ys: &[f64], q: f64, exclude: Option<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        validate(self.b(), q)?;
        let reps = self.replicates(x, ys, exclude)?;
        Ok(column_quantiles(&reps, q))
    }
}

/// Lower and upper quantiles of each column of a replicate matrix.
pub(crate) fn column_quantiles(reps: &DMatrix<f64>, q: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lower = Vec::with_capacity(reps.ncols());
    let mut upper = Vec::with_capacity(reps.ncols());
    let mut buf = vec![0.0; reps.nrows()];
    for col in reps.column_iter() {
        buf.copy_from_slice(col.as_slice());
        lower.push(quantile_in_place(&mut buf, q));
        upper.push(quantile_in_place(&mut buf, 1.0 - q));
    }
    (lower, upper)
}

/// Envelope of one group's conditional density at each query `(x, y)`.
pub fn bootstrap_envelopes(model: &CdeModel, b: usize, q: f64, queries: &[(Vec<f64>, f64)], seed: u64) -> Result<DensityEnvelope> {
    validate(b, q)?;
    let boot = BootstrapCde::new(model, b, seed)?;
    let mut lower = Vec::with_capacity(queries.len());
    let mut upper = Vec::with_capacity(queries.len());
    for (x, y) in queries {
        let (lo, hi) = boot.envelope(x, &[*y], q, None)?;
        lower.push(lo[0]);
        upper.push(hi[0]);
    }
    Ok(DensityEnvelope { q, b, lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop, prop_assert_eq, prop_assume, proptest};

    fn group(n: usize, seed: u64) -> CdeModel {
        let mut r = stream(seed, 9);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + r.random_range(-0.3..0.3)).collect();
        CdeModel::new(x, 1, y, false, 0.3, 0.25, 8).unwrap()
    }

    /// Reference replicate: rebuild the resampled data set row by row and
    /// evaluate a freshly constructed estimator on it.
    fn literal_replicate(m: &CdeModel, counts: &[u32], x: &[f64], y: f64) -> f64 {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (j, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                xs.extend_from_slice(m.row(j));
                ys.push(m.y()[j]);
            }
        }
        let k = m.k().min(ys.len());
        CdeModel::new(xs, m.d(), ys, false, m.h1(), m.h2(), k).unwrap().eval(x, y).unwrap()
    }

    #[test]
    fn replicates_match_literal_resampled_fits() {
        let m = group(40, 1);
        let boot = BootstrapCde::new(&m, 5, 3).unwrap();
        for (x, y) in [(0.2, 0.1), (-1.7, 2.5), (1.1, 1.0)] {
            let reps = boot.replicates(&[x], &[y], None).unwrap();
            for r in 0..5 {
                let lit = literal_replicate(&m, &boot.counts()[r], &[x], y);
                assert!((reps[(r, 0)] - lit).abs() < 1e-12 * lit.max(1e-300), "{} vs {lit}", reps[(r, 0)]);
            }
        }
        assert!(boot.counts().iter().all(|c| c.iter().sum::<u32>() == 40));
    }

    #[test]
    fn single_replicate_envelope_is_degenerate() {
        let m = group(30, 2);
        let env = bootstrap_envelopes(&m, 1, 0.05, &[(vec![0.5], 0.2), (vec![-0.5], 0.4)], 7).unwrap();
        let boot = BootstrapCde::new(&m, 1, 7).unwrap();
        for (i, (x, y)) in [(0.5, 0.2), (-0.5, 0.4)].iter().enumerate() {
            let v = boot.replicates(&[*x], &[*y], None).unwrap()[(0, 0)];
            assert_eq!(env.lower[i], v);
            assert_eq!(env.upper[i], v);
        }
    }

    #[test]
    fn median_level_collapses_envelope() {
        let m = group(30, 3);
        let boot = BootstrapCde::new(&m, 21, 1).unwrap();
        let reps = boot.replicates(&[0.3], &[0.1], None).unwrap();
        let mut col: Vec<f64> = reps.column(0).iter().copied().collect();
        col.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = boot.envelope(&[0.3], &[0.1], 0.5, None).unwrap();
        assert_eq!(lo[0], hi[0]);
        assert_eq!(lo[0], col[10]);
    }

    #[test]
    fn envelopes_usually_contain_point_estimate() {
        let m = group(200, 4);
        let mut r = stream(5, 5);
        let queries: Vec<(Vec<f64>, f64)> = (0..200)
            .map(|_| {
                let x = r.random_range(-1.8..1.8);
                (vec![x], x * x + r.random_range(-0.2..0.2))
            })
            .collect();
        let env = bootstrap_envelopes(&m, 100, 0.05, &queries, 11).unwrap();
        let covered = queries
            .iter()
            .zip(env.lower.iter().zip(&env.upper))
            .filter(|((x, y), (lo, hi))| {
                let p = m.eval(x, *y).unwrap();
                **lo <= p && p <= **hi
            })
            .count();
        assert!(covered as f64 >= 0.9 * 200.0, "covered {covered}");
        assert!(env.lower.iter().zip(&env.upper).all(|(l, u)| l <= u));
    }

    #[test]
    fn exclusion_drops_row_from_every_replicate() {
        let m = group(25, 6);
        let boot = BootstrapCde::new(&m, 4, 2).unwrap();
        let x = m.row(3).to_vec();
        let reps = boot.replicates(&x, &[0.0], Some(3)).unwrap();
        for r in 0..4 {
            let mut c = boot.counts()[r].clone();
            c[3] = 0;
            let lit = literal_replicate(&m, &c, &x, 0.0);
            assert!((reps[(r, 0)] - lit).abs() < 1e-12 * lit.max(1e-300));
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let m = group(10, 1);
        assert!(bootstrap_envelopes(&m, 0, 0.05, &[], 1).is_err());
        assert!(bootstrap_envelopes(&m, 10, 0.0, &[], 1).is_err());
        assert!(bootstrap_envelopes(&m, 10, 0.6, &[], 1).is_err());
    }

    proptest! {
        #[test]
        fn quantile_matches_sorted_reference(v in prop::collection::vec(-1e3f64..1e3, 1..120), p in 0.001f64..1.0) {
            let mut s = v.clone();
            s.sort_by(|a, b| a.total_cmp(b));
            let idx = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
            // Away from exact integer products the tolerance in the index
            // computation never matters.
            let prod = p * s.len() as f64;
            prop_assume!((prod - prod.round()).abs() > 1e-6);
            prop_assert_eq!(empirical_quantile(&v, p), s[idx]);
        }
    }

    #[test]
    fn quantile_index_convention() {
        assert_eq!(quantile_index(100, 0.05), 4);
        assert_eq!(quantile_index(100, 0.95), 94);
        assert_eq!(quantile_index(1, 0.05), 0);
        assert_eq!(quantile_index(21, 0.5), 10);
        assert_eq!(quantile_index(10, 1.0), 9);
    }
}
