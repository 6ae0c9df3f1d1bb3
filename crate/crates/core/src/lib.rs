//! Causal two-groups models for selecting latent treatment responders under
//! false discovery rate control.
//!
//! Two estimators are provided: an additive semi-parametric model
//! ([`add_c2g`]) and a fully nonparametric model with conservative priors and
//! effect intervals ([`np_c2g`]). [`selection`] holds the selection rules and
//! evaluation metrics, [`simgen`] the synthetic data generators, and
//! [`pipeline`] runs any method end to end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod add_c2g;
pub mod dataset;
pub mod density;
pub mod error;
pub mod kernel;
pub mod np_c2g;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod selection;
pub mod simgen;

pub use dataset::{load_dataset, split_by_treatment, Dataset, TreatmentSplit};
pub use error::{Error, Result};
pub use pipeline::{run_method, Method, MethodConfig, MethodOutput};
pub use selection::{PosteriorScores, ScoreSource, SelectionResult};
pub use simgen::{GeneratorTruth, Scenario};
