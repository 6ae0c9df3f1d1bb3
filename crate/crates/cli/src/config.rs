//! Experiment configuration: a JSON file merged with command line flags.

use std::path::{Path, PathBuf};

use c2g_core::np_c2g::default_alpha_grid;
use c2g_core::{Method, MethodConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Resolved settings of one invocation.
///
/// Every key is optional in the JSON file; missing keys take the defaults
/// below. Unknown keys are rejected.
///
/// ```json
/// {
///   "scenario": "additive",
///   "n": 1000,
///   "d": 10,
///   "tau": 5.0,
///   "seeds": [0, 1, 2],
///   "alphas": [0.05, 0.1, 0.2],
///   "alpha_grid": [0.01, 0.02, 0.05, 0.1, 0.2, 0.3],
///   "methods": ["add-c2g", "np-c2g"],
///   "estimators": { "np": { "bootstrap": 100, "q": 0.05 }, "add": { "rff_dim": 256 } },
///   "standardize": false,
///   "out": "results",
///   "workers": 2
/// }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub seeds: Vec<u64>,
    /// Levels reported in the metrics and aggregate tables.
    pub alphas: Vec<f64>,
    /// Levels of the selection curves.
    pub alpha_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub estimators: MethodConfig,
    pub standardize: bool,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Additive,
            n: 1000,
            d: 10,
            tau: 5.0,
            seeds: vec![0],
            alphas: vec![0.05, 0.1, 0.2],
            alpha_grid: default_alpha_grid(),
            methods: Method::ALL.to_vec(),
            estimators: MethodConfig::default(),
            standardize: false,
            out: None,
            workers: 1,
        }
    }
}

/// Flag values that override the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<Scenario>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub tau: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub alphas: Option<Vec<f64>>,
    pub methods: Option<Vec<Method>>,
    pub standardize: bool,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the file at `path` if given, then the flags.
    pub fn resolve(path: Option<&Path>, flags: Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_json_file(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.scenario {
            self.scenario = v;
        }
        if let Some(v) = o.n {
            self.n = v;
        }
        if let Some(v) = o.d {
            self.d = v;
        }
        if let Some(v) = o.tau {
            self.tau = v;
        }
        if let Some(v) = o.seeds {
            self.seeds = v;
        }
        if let Some(v) = o.alphas {
            self.alphas = v;
        }
        if let Some(v) = o.methods {
            self.methods = v;
        }
        if o.standardize {
            self.standardize = true;
        }
        if let Some(v) = o.out {
            self.out = Some(v);
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
    }

    /// Checks the invariants every subcommand relies on.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be positive".into());
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        for (name, grid) in [("alphas", &self.alphas), ("alpha_grid", &self.alpha_grid)] {
            if grid.is_empty() || grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                return bad(format!("{name} must be non-empty and inside (0, 1)"));
            }
            if grid.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("{name} must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Single-line JSON form used in output headers.
    pub fn to_header(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parses `3`, `1,4,9` or the half-open range `0..50`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
        if a >= b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad seed `{p}`"))).collect()
}
