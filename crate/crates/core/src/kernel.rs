//! RBF kernel machinery: kernel ridge regression tuned by generalized
//! cross-validation, closed-form leave-one-out predictions, and random
//! Fourier feature maps.
//!
//! The kernel is `k(x, x') = exp(-|x - x'|^2 / (2 h^2))` everywhere in the
//! crate, which is the scale matched by Fourier frequencies `w ~ N(0, I/h^2)`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::rng;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

pub fn rbf_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok((-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp())
}

/// Gram matrix of the row-major points `x` (n rows of length `d`).
pub fn kernel_matrix(x: &[f64], d: usize, bandwidth: f64) -> DMatrix<f64> {
    let n = x.len() / d;
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..i {
            let v = (-sq_dist(xi, &x[j * d..(j + 1) * d]) * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Median pairwise Euclidean distance. Large inputs use an evenly strided
/// subset of at most 1000 rows.
pub fn median_heuristic(x: &[f64], d: usize) -> f64 {
    let n = x.len() / d;
    let step = n.div_ceil(1000).max(1);
    let rows: Vec<&[f64]> = (0..n).step_by(step).map(|i| &x[i * d..(i + 1) * d]).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Bandwidth grid `median * {0.25, 0.5, 1, 2, 4}` and ridge grid
/// `n * {1e-3, 1e-2, 1e-1, 1}`.
pub fn default_krr_grids(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let med = median_heuristic(x, d);
    (
        [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|s| s * med).collect(),
        [1e-3, 1e-2, 1e-1, 1.0].iter().map(|s| s * n).collect(),
    )
}

/// A fitted kernel ridge regression `f(x) = sum_j a_j k(x, x_j)`.
#[derive(Debug, Clone)]
pub struct KrrModel {
    train_x: Vec<f64>,
    d: usize,
    dual_weights: Vec<f64>,
    bandwidth: f64,
    ridge: f64,
    hat_diag: Vec<f64>,
    fitted: Vec<f64>,
}

impl KrrModel {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dual_weights(&self) -> &[f64] {
        &self.dual_weights
    }

    /// Diagonal of the smoother `S = K (K + ridge I)^-1`.
    pub fn hat_diag(&self) -> &[f64] {
        &self.hat_diag
    }

    /// In-sample predictions `S y`.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn n_train(&self) -> usize {
        self.dual_weights.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        self.dual_weights
            .iter()
            .enumerate()
            .map(|(j, a)| a * (-sq_dist(x, &self.train_x[j * self.d..(j + 1) * self.d]) * inv).exp())
            .sum()
    }

    /// Predictions for row-major points `x`.
    pub fn predict_many(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.d).map(|r| self.predict(r)).collect()
    }
}

fn check_inputs(x: &[f64], d: usize, y: &[f64], bandwidth: f64, ridge: f64) -> Result<()> {
    if d == 0 || y.is_empty() || x.len() != y.len() * d {
        return Err(Error::InvalidInput(format!(
            "need n >= 1 rows of dimension d >= 1 (got {} values for {} targets, d = {d})",
            x.len(),
            y.len()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be non-negative, got {ridge}")));
    }
    Ok(())
}

fn has_duplicate_rows(x: &[f64], d: usize) -> bool {
    let mut rows: Vec<&[f64]> = x.chunks(d).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.windows(2).any(|w| w[0] == w[1])
}

/// Solves `(K + ridge I) a = y` by Cholesky factorisation. When the
/// factorisation fails, `1e-10 * trace(K) / n` is added to the diagonal once.
pub fn fit_krr(x: &[f64], d: usize, y: &[f64], bandwidth: f64, ridge: f64) -> Result<KrrModel> {
    check_inputs(x, d, y, bandwidth, ridge)?;
    let n = y.len();
    if ridge == 0.0 && has_duplicate_rows(x, d) {
        return Err(Error::Singular("duplicate training points with zero ridge".into()));
    }
    let k = kernel_matrix(x, d, bandwidth);
    let mut effective = ridge;
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * k.trace() / n as f64;
            effective += jitter;
            for i in 0..n {
                a[(i, i)] += jitter;
            }
            a.cholesky()
                .ok_or_else(|| Error::Singular("kernel system is not positive definite".into()))?
        }
    };
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let fitted = (&k * &alpha).as_slice().to_vec();
    let hat_diag = if effective == 0.0 {
        vec![1.0; n]
    } else {
        let inv = chol.inverse();
        (0..n).map(|i| 1.0 - effective * inv[(i, i)]).collect()
    };
    Ok(KrrModel {
        train_x: x.to_vec(),
        d,
        dual_weights: alpha.as_slice().to_vec(),
        bandwidth,
        ridge,
        hat_diag,
        fitted,
    })
}

/// Eigendecomposition of a Gram matrix together with the projection of the
/// targets; evaluates GCV for any ridge in O(n).
struct KernelSpectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    proj: DVector<f64>,
}

impl KernelSpectrum {
    fn new(x: &[f64], d: usize, y: &[f64], bandwidth: f64) -> Self {
        let eig = kernel_matrix(x, d, bandwidth).symmetric_eigen();
        let proj = eig.eigenvectors.transpose() * DVector::from_column_slice(y);
        Self {
            eigenvalues: eig.eigenvalues.map(|e| e.max(0.0)),
            eigenvectors: eig.eigenvectors,
            proj,
        }
    }

    fn gcv(&self, ridge: f64) -> f64 {
        if ridge == 0.0 {
            return f64::INFINITY;
        }
        let n = self.proj.len() as f64;
        let (mut rss, mut tr) = (0.0, 0.0);
        for (e, p) in self.eigenvalues.iter().zip(self.proj.iter()) {
            let shrink = ridge / (e + ridge);
            rss += (shrink * p).powi(2);
            tr += shrink;
        }
        if tr <= 0.0 {
            return f64::INFINITY;
        }
        (rss / n) / (tr / n).powi(2)
    }

    fn model(&self, x: &[f64], d: usize, bandwidth: f64, ridge: f64) -> KrrModel {
        let v = &self.eigenvectors;
        let n = self.proj.len();
        let coef_dual = DVector::from_iterator(n, self.eigenvalues.iter().zip(self.proj.iter()).map(|(e, p)| p / (e + ridge)));
        let coef_fit = DVector::from_iterator(n, self.eigenvalues.iter().zip(self.proj.iter()).map(|(e, p)| p * e / (e + ridge)));
        let alpha = v * coef_dual;
        let fitted = v * coef_fit;
        let s: Vec<f64> = self.eigenvalues.iter().map(|e| e / (e + ridge)).collect();
        let hat_diag = (0..n)
            .map(|i| (0..n).map(|j| v[(i, j)] * v[(i, j)] * s[j]).sum())
            .collect();
        KrrModel {
            train_x: x.to_vec(),
            d,
            dual_weights: alpha.as_slice().to_vec(),
            bandwidth,
            ridge,
            hat_diag,
            fitted: fitted.as_slice().to_vec(),
        }
    }
}

/// Generalized cross-validation score
/// `(1/n)|(I - S) y|^2 / ((1/n) tr(I - S))^2`; `+inf` when `tr(I - S) = 0`.
pub fn gcv_score(x: &[f64], d: usize, y: &[f64], bandwidth: f64, ridge: f64) -> Result<f64> {
    check_inputs(x, d, y, bandwidth, ridge)?;
    if ridge == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(KernelSpectrum::new(x, d, y, bandwidth).gcv(ridge))
}

/// Fits the grid point with the lowest GCV score. Exact ties go to the larger
/// ridge, then the larger bandwidth.
pub fn tune_krr(x: &[f64], d: usize, y: &[f64], bandwidth_grid: &[f64], ridge_grid: &[f64]) -> Result<KrrModel> {
    if bandwidth_grid.is_empty() || ridge_grid.is_empty() {
        return Err(Error::InvalidInput("empty tuning grid".into()));
    }
    for &bw in bandwidth_grid {
        for &r in ridge_grid {
            check_inputs(x, d, y, bw, r)?;
        }
    }
    let mut best: Option<(f64, f64, f64)> = None;
    let mut best_spectrum = None;
    for &bw in bandwidth_grid {
        let spectrum = KernelSpectrum::new(x, d, y, bw);
        let mut improved = false;
        for &r in ridge_grid {
            let score = spectrum.gcv(r);
            if !score.is_finite() {
                continue;
            }
            let better = match best {
                None => true,
                Some((s, br, bb)) => score < s || (score == s && (r > br || (r == br && bw > bb))),
            };
            if better {
                best = Some((score, r, bw));
                improved = true;
            }
        }
        if improved {
            best_spectrum = Some(spectrum);
        }
    }
    match (best, best_spectrum) {
        (Some((_, ridge, bw)), Some(s)) => Ok(s.model(x, d, bw, ridge)),
        _ => Err(Error::NoFiniteCandidate("every GCV score on the grid is infinite".into())),
    }
}

/// Closed-form leave-one-out predictions
/// `(yhat_i - S_ii y_i) / (1 - S_ii)` for every training point.
pub fn loo_predictions(model: &KrrModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.n_train() {
        return Err(Error::InvalidInput("targets do not match the training set".into()));
    }
    y.iter()
        .zip(model.fitted())
        .zip(model.hat_diag())
        .enumerate()
        .map(|(i, ((&yi, &fi), &s))| {
            if s >= 1.0 - 1e-12 {
                Err(Error::Singular(format!("smoother diagonal at point {i} is {s}")))
            } else {
                Ok((fi - s * yi) / (1.0 - s))
            }
        })
        .collect()
}

/// Random Fourier feature map approximating the RBF kernel:
/// `phi_j(x) = sqrt(2/D) cos(w_j . x + b_j)`.
#[derive(Debug, Clone)]
pub struct RffMap {
    frequencies: DMatrix<f64>,
    phases: Vec<f64>,
    bandwidth: f64,
    seed: u64,
}

impl RffMap {
    pub fn new(d: usize, dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if dim == 0 || d == 0 {
            return Err(Error::InvalidInput("feature and input dimensions must be positive".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut rng = rng::stream(seed, rng::streams::RFF);
        let frequencies = DMatrix::from_fn(dim, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / bandwidth
        });
        let unif = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let phases = (0..dim).map(|_| unif.sample(&mut rng)).collect();
        Ok(Self { frequencies, phases, bandwidth, seed })
    }

    pub fn dim(&self) -> usize {
        self.phases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Feature matrix (n x D) for row-major points `x`.
    pub fn features(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.input_dim();
        let n = x.len() / d;
        let dim = self.dim();
        let scale = (2.0 / dim as f64).sqrt();
        let xm = DMatrix::from_row_slice(n, d, x);
        let mut z = xm * self.frequencies.transpose();
        for j in 0..dim {
            let b = self.phases[j];
            for i in 0..n {
                z[(i, j)] = scale * (z[(i, j)] + b).cos();
            }
        }
        z
    }
}

pub fn rff_features(x: &[f64], d: usize, bandwidth: f64, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(RffMap::new(d, dim, bandwidth, seed)?.features(x))
}
