use thiserror::Error;

/// Errors raised by the estimator and its supporting machinery.
#[derive(Debug, Error)]
pub enum CggmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("infeasible state: {0}")]
    Infeasible(String),

    #[error("non-finite objective at iteration {iteration} (clusters: {clusters})")]
    NonFinite { iteration: usize, clusters: usize },

    #[error("solver failed at lambda_c = {lambda_c}: {source}")]
    Path {
        lambda_c: f64,
        #[source]
        source: Box<CggmError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl CggmError {
    /// True for failures caused by the numbers rather than the inputs' shape.
    pub fn is_numerical(&self) -> bool {
        match self {
            CggmError::NotPositiveDefinite(_)
            | CggmError::Infeasible(_)
            | CggmError::NonFinite { .. } => true,
            CggmError::Path { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<csv::Error> for CggmError {
    fn from(e: csv::Error) -> Self {
        CggmError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for CggmError {
    fn from(e: serde_json::Error) -> Self {
        CggmError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CggmError>;
