//! Command implementations behind the `c2g` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use config::{parse_seeds, ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] c2g_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("every method failed on every seed")]
    AllFailed,
}

impl CliError {
    /// Process exit status: 2 for bad input, 3 when an estimator failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Csv(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(c2g_core::Error::Io(_)) => 2,
            CliError::Core(_) | CliError::AllFailed => 3,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
