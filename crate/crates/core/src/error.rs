use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("treatment group `{0}` is empty")]
    EmptyGroup(&'static str),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("no finite candidate: {0}")]
    NoFiniteCandidate(String),

    #[error("conditional density undefined at query {0}")]
    ZeroDenominator(String),

    #[error("quadrature mass {mass} deviates from one")]
    Quadrature { mass: f64 },

    #[error("ground truth unavailable: {0}")]
    NoTruth(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error stems from malformed user input rather than an
    /// estimator that failed on valid data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::MissingColumn(_)
                | Error::InvalidRow { .. }
                | Error::EmptyGroup(_)
                | Error::NoTruth(_)
                | Error::UnknownScenario(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
