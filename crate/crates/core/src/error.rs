//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, symmetry, signs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed or non-finite.
    #[error("data error: {0}")]
    Data(String),

    #[error("integration failed at t = {time}: {message}")]
    Integration { time: f64, message: String },

    #[error("training failed on batch {batch}: {message}")]
    Training { batch: usize, message: String },

    /// The perturbation solver could not reach the feasible set.
    #[error("solver failed after {iterations} iterations: best min eigenvalue {best_min_eig:.6e}")]
    SolverFailure { best_min_eig: f64, iterations: usize },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    Schema { expected: u32, found: u32 },

    #[error("digest mismatch: expected {expected}, found {found}")]
    Digest { expected: String, found: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Integration { .. } => "integration",
            Error::Training { .. } => "training",
            Error::SolverFailure { .. } => "solver_failure",
            Error::Schema { .. } => "schema",
            Error::Digest { .. } => "digest",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
