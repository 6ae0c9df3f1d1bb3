//! Synthetic data generators with stored ground truth.
//!
//! Parameter draws (coefficients, interaction masks) come from one random
//! stream and per-sample draws from another, so the parameters of a seed do
//! not depend on `n`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::density::normal_pdf;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::selection::{PosteriorScores, ScoreSource};

const PARAM_STREAM: u64 = 101;
const SAMPLE_STREAM: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Additive,
    Nonadditive,
    /// Latent `U` drives both treatment and response.
    Response,
    /// Latent `U` shifts non-responder outcomes.
    Effect,
    /// Discrete construction where treated and untreated outcomes have
    /// disjoint supports.
    Canonical,
    /// Response and effect confounding combined.
    Total,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Additive,
        Scenario::Nonadditive,
        Scenario::Response,
        Scenario::Effect,
        Scenario::Canonical,
        Scenario::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Additive => "additive",
            Scenario::Nonadditive => "nonadditive",
            Scenario::Response => "response",
            Scenario::Effect => "effect",
            Scenario::Canonical => "canonical",
            Scenario::Total => "total",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Univariate outcome law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Dist {
    pub fn pdf(&self, y: f64) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => normal_pdf(y, mean, sd),
            Dist::Uniform { lo, hi } => {
                if (lo..=hi).contains(&y) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Normal { mean, .. } => mean,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    /// Interval holding all but a negligible fraction of the mass.
    pub fn span(&self) -> (f64, f64) {
        match *self {
            Dist::Normal { mean, sd } => (mean - 10.0 * sd, mean + 10.0 * sd),
            Dist::Uniform { lo, hi } => (lo, hi),
        }
    }
}

/// Analytic outcome laws of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    /// `Pr(H = 1 | X = x, T = 1)`.
    pub pi: f64,
    /// `Y | X = x, T = 1, H = 0`.
    pub nonresponder: Dist,
    /// `Y | X = x, T = 1, H = 1`.
    pub responder: Dist,
    /// `Y | X = x, T = 0`.
    pub untreated: Dist,
}

impl SampleTruth {
    /// Treated outcome density `(1 - pi) f_nonresponder + pi f_responder`.
    pub fn treated_pdf(&self, y: f64) -> f64 {
        (1.0 - self.pi) * self.nonresponder.pdf(y) + self.pi * self.responder.pdf(y)
    }

    /// `Pr(H = 0 | X = x, Y = y, T = 1)`; 1 when both component densities
    /// vanish at `y`.
    pub fn null_posterior(&self, y: f64) -> f64 {
        let a = (1.0 - self.pi) * self.nonresponder.pdf(y);
        let b = self.pi * self.responder.pdf(y);
        if a + b > 0.0 {
            a / (a + b)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub scenario: Scenario,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub seed: u64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub c: Option<f64>,
    /// Row-major `d x d` product `B_ij Z_ij` of the interaction term.
    pub interactions: Option<Vec<f64>>,
    /// Latent confounder draws, where the scenario has one.
    pub u: Option<Vec<f64>>,
    pub h: Vec<bool>,
    /// Per-sample analytic laws; absent when they have no closed form.
    pub samples: Option<Vec<SampleTruth>>,
}

impl GeneratorTruth {
    pub fn has_analytic(&self) -> bool {
        self.samples.is_some()
    }

    pub fn sample(&self, i: usize) -> Result<&SampleTruth> {
        self.samples
            .as_ref()
            .ok_or_else(|| Error::NoTruth(format!("scenario `{}` has no analytic component densities", self.scenario)))?
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("sample {i} out of range")))
    }

    /// Population mean of `mu_1(x) - mu_0(x)` over the treated samples.
    pub fn true_are(&self, ds: &Dataset) -> Result<f64> {
        let treated: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i]).collect();
        if treated.is_empty() {
            return Err(Error::EmptyGroup("treated"));
        }
        let mut total = 0.0;
        for &i in &treated {
            let s = self.sample(i)?;
            total += s.responder.mean() - s.untreated.mean();
        }
        Ok(total / treated.len() as f64)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))`, rewritten as `z + log1p(exp(-z))` above 30.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_size(n: usize, d: usize) -> Result<()> {
    if n < 2 || d < 1 {
        return Err(Error::InvalidInput(format!("generators need n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    Ok(())
}

/// `N(0, I_d / sqrt(d))` coefficient vector.
fn coefficients<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let sd = (d as f64).powf(-0.25);
    let dist = Normal::new(0.0, sd).expect("positive sd");
    (0..d).map(|_| dist.sample(rng)).collect()
}

fn standard_normals<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Common {
    beta: Vec<f64>,
    gamma: Vec<f64>,
    theta: Vec<f64>,
}

fn common_params(d: usize, seed: u64) -> (Common, crate::rng::Rng) {
    let mut p = stream(seed, PARAM_STREAM);
    let beta = coefficients(&mut p, d);
    let gamma = coefficients(&mut p, d);
    let theta = coefficients(&mut p, d);
    (Common { beta, gamma, theta }, p)
}

fn additive_means(x: &[f64], gamma: &[f64], tau: f64) -> (f64, f64) {
    let mu0 = dot(gamma, x);
    let shift: f64 = x.iter().zip(gamma).map(|(a, b)| a.abs() * b.abs()).sum();
    (mu0, mu0 + tau * shift)
}

fn build(
    scenario: Scenario,
    (n, d, tau, seed): (usize, usize, f64, u64),
    params: (Common, Option<f64>, Option<Vec<f64>>),
    cols: (Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>),
    u: Option<Vec<f64>>,
    samples: Option<Vec<SampleTruth>>,
) -> Result<(Dataset, GeneratorTruth)> {
    let (common, c, interactions) = params;
    let (x, y, t, h) = cols;
    let ds = Dataset::new(x, d, y, t, Some(h.clone()))?;
    let theta = matches!(scenario, Scenario::Additive | Scenario::Nonadditive).then_some(common.theta);
    let truth = GeneratorTruth {
        scenario,
        n,
        d,
        tau,
        seed,
        beta: common.beta,
        gamma: common.gamma,
        theta,
        c,
        interactions,
        u,
        h,
        samples,
    };
    Ok((ds, truth))
}

/// Additive design: `T ~ Bern(1/2)`, `H | T=1 ~ Bern(sigmoid(beta'X))`,
/// `mu_0 = gamma'X`, `mu_1 = mu_0 + tau sum_i |X_i| |gamma_i|`, unit-variance
/// normal noise.
pub fn gen_additive(n: usize, d: usize, tau: f64, seed: u64) -> Result<(Dataset, GeneratorTruth)> {
    check_size(n, d)?;
    let (common, _) = common_params(d, seed);
    let mut r = stream(seed, SAMPLE_STREAM);
    let (mut xs, mut ys, mut ts, mut hs, mut truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x = standard_normals(&mut r, d);
        let t = r.random_bool(0.5);
        let pi = sigmoid(dot(&common.beta, &x));
        let h = t && r.random::<f64>() < pi;
        let (mu0, mu1) = additive_means(&x, &common.gamma, tau);
        let eps: f64 = r.sample(StandardNormal);
        ys.push(if h { mu1 } else { mu0 } + eps);
        let n0 = Dist::Normal { mean: mu0, sd: 1.0 };
        truth.push(SampleTruth { pi, nonresponder: n0, responder: Dist::Normal { mean: mu1, sd: 1.0 }, untreated: n0 });
        xs.extend(x);
        ts.push(t);
        hs.push(h);
    }
    build(Scenario::Additive, (n, d, tau, seed), (common, None, None), (xs, ys, ts, hs), None, Some(truth))
}

/// Nonadditive design with a confounded treatment, random sparse pairwise
/// interactions with Student-t(3) weights and a softplus link.
pub fn gen_nonadditive(n: usize, d: usize, tau: f64, seed: u64) -> Result<(Dataset, GeneratorTruth)> {
    check_size(n, d)?;
    let (common, mut p) = common_params(d, seed);
    let c = p.sample::<f64, _>(StandardNormal).abs() * 2.0;
    let student = StudentT::new(3.0).expect("valid dof");
    let interactions: Vec<f64> = (0..d * d)
        .map(|_| {
            let b = p.random_bool(0.1);
            let z = student.sample(&mut p);
            if b {
                z
            } else {
                0.0
            }
        })
        .collect();
    let mut r = stream(seed, SAMPLE_STREAM);
    let (mut xs, mut ys, mut ts, mut hs, mut truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x = standard_normals(&mut r, d);
        let w = dot(&common.gamma, &x);
        let t = r.random::<f64>() < sigmoid(w);
        let pi = sigmoid(dot(&common.beta, &x));
        let h = t && r.random::<f64>() < pi;
        let mut l = 0.0;
        for i in 0..d {
            for j in 0..d {
                l += interactions[i * d + j] * x[i] * x[j];
            }
        }
        let base = c * w + dot(&common.theta, &x) + l;
        let (m0, m1) = (softplus(base), softplus(base + tau));
        let eps: f64 = r.sample(StandardNormal);
        ys.push(if h { m1 } else { m0 } + eps);
        let n0 = Dist::Normal { mean: m0, sd: 1.0 };
        truth.push(SampleTruth { pi, nonresponder: n0, responder: Dist::Normal { mean: m1, sd: 1.0 }, untreated: n0 });
        xs.extend(x);
        ts.push(t);
        hs.push(h);
    }
    build(
        Scenario::Nonadditive,
        (n, d, tau, seed),
        (common, Some(c), Some(interactions)),
        (xs, ys, ts, hs),
        None,
        Some(truth),
    )
}

/// `Pr(H = 1 | x, T = 1)` when `T ~ Bern(sigmoid(u))`,
/// `H ~ Bern(sigmoid(a + u))` and `U ~ N(0, 1)`, by quadrature over `u`.
fn response_pi(a: f64) -> f64 {
    let step = 0.01;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in -1000..=1000 {
        let u = k as f64 * step;
        let wt = normal_pdf(u, 0.0, 1.0) * sigmoid(u);
        num += wt * sigmoid(a + u);
        den += wt;
    }
    num / den
}

/// Latent-confounding scenarios built on the additive design. `Additive`
/// and `Nonadditive` dispatch to their own generators.
pub fn gen_confounded(scenario: Scenario, n: usize, d: usize, tau: f64, seed: u64) -> Result<(Dataset, GeneratorTruth)> {
    match scenario {
        Scenario::Additive => return gen_additive(n, d, tau, seed),
        Scenario::Nonadditive => return gen_nonadditive(n, d, tau, seed),
        _ => {}
    }
    check_size(n, d)?;
    let (common, _) = common_params(d, seed);
    let mut r = stream(seed, SAMPLE_STREAM);
    let (mut xs, mut ys, mut ts, mut hs, mut us, mut truth) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let sqrt2 = std::f64::consts::SQRT_2;
    for _ in 0..n {
        let x = standard_normals(&mut r, d);
        let (mu0, mu1) = additive_means(&x, &common.gamma, tau);
        let a = dot(&common.beta, &x);
        let (y, t, h, u, s) = match scenario {
            Scenario::Response => {
                let u: f64 = r.sample(StandardNormal);
                let t = r.random::<f64>() < sigmoid(u);
                let h = t && r.random::<f64>() < sigmoid(a + u);
                let eps: f64 = r.sample(StandardNormal);
                let n0 = Dist::Normal { mean: mu0, sd: 1.0 };
                let s = SampleTruth {
                    pi: response_pi(a),
                    nonresponder: n0,
                    responder: Dist::Normal { mean: mu1, sd: 1.0 },
                    untreated: n0,
                };
                (if h { mu1 } else { mu0 } + eps, t, h, u, Some(s))
            }
            Scenario::Effect => {
                let u: f64 = r.sample(StandardNormal);
                let t = r.random_bool(0.5);
                let pi = sigmoid(a);
                let h = t && r.random::<f64>() < pi;
                let eps: f64 = r.sample(StandardNormal);
                let y = if h { mu1 + eps } else { mu0 + u + eps };
                let n0 = Dist::Normal { mean: mu0, sd: sqrt2 };
                let s = SampleTruth { pi, nonresponder: n0, responder: Dist::Normal { mean: mu1, sd: 1.0 }, untreated: n0 };
                (y, t, h, u, Some(s))
            }
            Scenario::Canonical => {
                let u_one = r.random_bool(0.5);
                let t = !u_one;
                let h = t && r.random_bool(0.5);
                let y = if t { r.random_range(0.0..1.0) } else { r.random_range(2.0..3.0) };
                let treated = Dist::Uniform { lo: 0.0, hi: 1.0 };
                let s = SampleTruth {
                    pi: 0.5,
                    nonresponder: treated,
                    responder: treated,
                    untreated: Dist::Uniform { lo: 2.0, hi: 3.0 },
                };
                (y, t, h, if u_one { 1.0 } else { 0.0 }, Some(s))
            }
            Scenario::Total => {
                let u: f64 = r.sample(StandardNormal);
                let t = r.random::<f64>() < sigmoid(u);
                let h = t && r.random::<f64>() < sigmoid(a + u);
                let eps: f64 = r.sample(StandardNormal);
                let y = if h { mu1 + eps } else { mu0 + u + eps };
                (y, t, h, u, None)
            }
            Scenario::Additive | Scenario::Nonadditive => unreachable!(),
        };
        xs.extend(x);
        ys.push(y);
        ts.push(t);
        hs.push(h);
        us.push(u);
        if let Some(s) = s {
            truth.push(s);
        }
    }
    let samples = (scenario != Scenario::Total).then_some(truth);
    build(scenario, (n, d, tau, seed), (common, None, None), (xs, ys, ts, hs), Some(us), samples)
}

/// Any scenario by tag.
pub fn generate(scenario: Scenario, n: usize, d: usize, tau: f64, seed: u64) -> Result<(Dataset, GeneratorTruth)> {
    gen_confounded(scenario, n, d, tau, seed)
}

/// True null posterior `Pr(H = 0 | x_i, y, T = 1)` of sample `i`.
pub fn true_posterior(truth: &GeneratorTruth, i: usize, y: f64) -> Result<f64> {
    Ok(truth.sample(i)?.null_posterior(y))
}

/// True null posteriors of every treated sample.
pub fn true_posteriors(truth: &GeneratorTruth, ds: &Dataset) -> Result<PosteriorScores> {
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i]).collect();
    let w = idx.iter().map(|&i| true_posterior(truth, i, ds.y()[i])).collect::<Result<Vec<_>>>()?;
    PosteriorScores::new(idx, w, ScoreSource::Oracle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};

    fn ks_one_sample(mut v: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let v = a[i].min(b[j]);
            while i < a.len() && a[i] <= v {
                i += 1;
            }
            while j < b.len() && b[j] <= v {
                j += 1;
            }
            best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        best
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!(matches!("nope".parse::<Scenario>(), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn every_generator_respects_invariants_and_seeds() {
        for s in Scenario::ALL {
            let (a, ta) = generate(s, 300, 4, 2.0, 9).unwrap();
            let (b, tb) = generate(s, 300, 4, 2.0, 9).unwrap();
            assert_eq!(a.y(), b.y());
            assert_eq!(a.x(), b.x());
            assert_eq!(ta, tb);
            let h = a.h().unwrap();
            assert!((0..300).all(|i| a.t()[i] || !h[i]));
            assert_eq!(h, ta.h.as_slice());
            assert_eq!(ta.has_analytic(), s != Scenario::Total);
            let (c, _) = generate(s, 300, 4, 2.0, 10).unwrap();
            assert_ne!(a.y(), c.y());
        }
    }

    #[test]
    fn zero_tau_makes_components_coincide() {
        for (ds, truth) in [gen_additive(200, 3, 0.0, 1).unwrap(), gen_nonadditive(200, 3, 0.0, 1).unwrap()] {
            for i in 0..ds.n() {
                let s = truth.sample(i).unwrap();
                assert_eq!(s.nonresponder, s.responder);
                assert_eq!(s.untreated, s.nonresponder);
            }
        }
    }

    #[test]
    fn additive_mean_effect_matches_expectation() {
        let tau = 2.0;
        let (ds, truth) = gen_additive(100_000, 10, tau, 3).unwrap();
        let effects: Vec<f64> =
            (0..ds.n()).map(|i| truth.sample(i).unwrap().responder.mean() - truth.sample(i).unwrap().nonresponder.mean()).collect();
        let mc = effects.iter().sum::<f64>() / effects.len() as f64;
        // E|X_i| = sqrt(2 / pi) for a standard normal.
        let exact = tau * (2.0 / std::f64::consts::PI).sqrt() * truth.gamma.iter().map(|g| g.abs()).sum::<f64>();
        assert!((mc - exact).abs() < 0.01 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn additive_noise_is_standard_normal() {
        let (ds, truth) = gen_additive(100_000, 5, 3.0, 4).unwrap();
        let resid: Vec<f64> = (0..ds.n())
            .map(|i| {
                let s = truth.sample(i).unwrap();
                let m = if truth.h[i] { s.responder.mean() } else { s.nonresponder.mean() };
                ds.y()[i] - m
            })
            .collect();
        let std = SNormal::new(0.0, 1.0).unwrap();
        let ks = ks_one_sample(resid, |v| std.cdf(v));
        // 1% critical value of the one-sample statistic.
        assert!(ks < 1.628 / (100_000f64).sqrt(), "{ks}");
    }

    #[test]
    fn softplus_is_stable() {
        let z = 20.0;
        assert!((softplus(z) - (1.0 + f64::exp(z)).ln()).abs() < 1e-12);
        assert!((softplus(-3.0) - (1.0 + f64::exp(-3.0)).ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(31.0) > 31.0 && (softplus(31.0) - 31.0) < 1e-13);
    }

    #[test]
    fn student_t_has_variance_three() {
        let mut r = stream(5, 5);
        let t = StudentT::new(3.0).unwrap();
        let n = 1_000_000;
        let v: Vec<f64> = (0..n).map(|_| t.sample(&mut r)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 3.0).abs() < 0.15, "{var}");
    }

    #[test]
    fn nonadditive_parameters_are_stored() {
        let (_, truth) = gen_nonadditive(50, 6, 3.0, 2).unwrap();
        assert!(truth.c.unwrap() >= 0.0);
        let inter = truth.interactions.as_ref().unwrap();
        assert_eq!(inter.len(), 36);
        assert!(truth.theta.is_some());
    }

    #[test]
    fn canonical_marginals() {
        let (ds, _) = gen_confounded(Scenario::Canonical, 10_000, 3, 1.0, 6).unwrap();
        let t = ds.t().iter().filter(|&&v| v).count() as f64;
        let h = ds.h().unwrap().iter().filter(|&&v| v).count() as f64;
        assert!((t / 10_000.0 - 0.5).abs() < 0.02);
        assert!((h / t - 0.5).abs() < 0.02);
        assert!((0..ds.n()).all(|i| if ds.t()[i] { ds.y()[i] < 1.0 } else { ds.y()[i] >= 2.0 }));
    }

    #[test]
    fn effect_scenario_variances() {
        let (ds, truth) = gen_confounded(Scenario::Effect, 10_000, 4, 2.0, 7).unwrap();
        let resid = |pred: &dyn Fn(usize) -> bool, resp: bool| -> f64 {
            let r: Vec<f64> = (0..ds.n())
                .filter(|&i| pred(i))
                .map(|i| {
                    let s = truth.sample(i).unwrap();
                    ds.y()[i] - if resp { s.responder.mean() } else { s.untreated.mean() }
                })
                .collect();
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64
        };
        let h = ds.h().unwrap();
        assert!((resid(&|i| !ds.t()[i], false) - 2.0).abs() < 0.1);
        assert!((resid(&|i| h[i], true) - 1.0).abs() < 0.1);
    }

    #[test]
    fn response_confounding_keeps_untreated_law() {
        let n = 10_000;
        let (conf, truth) = gen_confounded(Scenario::Response, n, 10, 5.0, 8).unwrap();
        let (plain, _) = gen_additive(n, 10, 5.0, 8).unwrap();
        let untreated = |ds: &Dataset| -> Vec<f64> { (0..ds.n()).filter(|&i| !ds.t()[i]).map(|i| ds.y()[i]).collect() };
        let a = untreated(&conf);
        assert!(ks_two_sample(a.clone(), untreated(&plain)) < 0.03);
        // Exact law: gamma'X + eps ~ N(0, |gamma|^2 + 1).
        let sd = (truth.gamma.iter().map(|g| g * g).sum::<f64>() + 1.0).sqrt();
        let law = SNormal::new(0.0, sd).unwrap();
        assert!(ks_one_sample(a, |v| law.cdf(v)) < 0.03);
    }

    #[test]
    fn response_pi_matches_simulation() {
        let (ds, truth) = gen_confounded(Scenario::Response, 40_000, 2, 1.0, 11).unwrap();
        // Treated samples with beta'x near zero: pi(x) = E[sigmoid(U) | T = 1].
        let h = ds.h().unwrap();
        let near: Vec<usize> =
            (0..ds.n()).filter(|&i| ds.t()[i] && dot(&truth.beta, ds.row(i)).abs() < 0.1).collect();
        let rate = near.iter().filter(|&&i| h[i]).count() as f64 / near.len() as f64;
        assert!((rate - response_pi(0.0)).abs() < 0.04, "{rate} vs {}", response_pi(0.0));
        assert!(response_pi(0.0) > 0.5);
        assert!((response_pi(-40.0)).abs() < 1e-12);
    }

    #[test]
    fn posterior_examples() {
        let n0 = Dist::Normal { mean: 0.0, sd: 1.0 };
        let n1 = Dist::Normal { mean: 4.0, sd: 1.0 };
        let s = SampleTruth { pi: 0.0, nonresponder: n0, responder: n1, untreated: n0 };
        assert_eq!(s.null_posterior(3.0), 1.0);
        let s = SampleTruth { pi: 0.5, ..s };
        assert!((s.null_posterior(2.0) - 0.5).abs() < 1e-15);
        let u = Dist::Uniform { lo: 0.0, hi: 1.0 };
        let s = SampleTruth { pi: 0.5, nonresponder: u, responder: u, untreated: u };
        assert_eq!(s.null_posterior(5.0), 1.0);
    }

    #[test]
    fn posterior_matches_rejection_sampling() {
        let (ds, truth) = gen_additive(50, 3, 0.5, 12).unwrap();
        let mut r = stream(13, 1);
        let treated: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i]).take(3).collect();
        for &i in &treated {
            let s = truth.sample(i).unwrap();
            let y = ds.y()[i];
            let (mut acc, mut nulls) = (0u64, 0u64);
            for _ in 0..1_000_000 {
                let h = r.random::<f64>() < s.pi;
                let draw = if h { s.responder.mean() } else { s.nonresponder.mean() } + r.sample::<f64, _>(StandardNormal);
                if (draw - y).abs() < 0.05 {
                    acc += 1;
                    nulls += u64::from(!h);
                }
            }
            let mc = nulls as f64 / acc as f64;
            let exact = true_posterior(&truth, i, y).unwrap();
            assert!((mc - exact).abs() < 0.01 + 3.0 * (exact * (1.0 - exact) / acc as f64).sqrt(), "{mc} vs {exact}");
        }
    }

    #[test]
    fn total_scenario_has_no_analytic_posterior() {
        let (ds, truth) = gen_confounded(Scenario::Total, 100, 2, 1.0, 1).unwrap();
        assert!(matches!(true_posteriors(&truth, &ds), Err(Error::NoTruth(_))));
    }

    #[test]
    fn truth_json_round_trip() {
        let (_, truth) = gen_nonadditive(30, 3, 1.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        truth.write_json(&p).unwrap();
        assert_eq!(GeneratorTruth::read_json(&p).unwrap(), truth);
    }
}
