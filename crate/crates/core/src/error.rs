use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cluster {cluster} received zero mass")]
    DegenerateCluster { cluster: usize },
    #[error(
        "inner solve did not converge at beta={beta}: {iterations} iterations, residual {residual:e}, path {path}"
    )]
    NonConvergence {
        beta: f64,
        iterations: usize,
        residual: f64,
        path: String,
    },
    #[error("problem too large: {what} = {size} exceeds limit {limit}")]
    TooLarge {
        what: String,
        size: usize,
        limit: usize,
    },
    #[error("autonomy depends on cluster positions; {0} requires a position-independent model")]
    PositionDependentAutonomy(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by malformed user input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidInput(_)
                | Error::Parse { .. }
                | Error::TooLarge { .. }
                | Error::PositionDependentAutonomy(_)
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
