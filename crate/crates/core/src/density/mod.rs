//! Density estimation: predictive recursion for residual densities and the
//! nearest-neighbour Rosenblatt conditional density estimator with bootstrap
//! envelopes.

pub mod bootstrap;
pub mod cde;
pub mod pr;

pub use bootstrap::{bootstrap_envelopes, empirical_quantile, BootstrapCde, DensityEnvelope};
pub use cde::{cde_eval, cde_tune, CdeGrid, CdeModel};
pub use pr::{predictive_recursion, prml_select_bandwidth, PrConfig, PrDensity};

pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Normal density with mean `mean` and standard deviation `sd`.
pub fn normal_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    INV_SQRT_2PI / sd * (-0.5 * z * z).exp()
}

pub fn normal_log_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.918_938_533_204_672_7
}
