use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient quotes: need {needed}, have {available}")]
    InsufficientQuotes { needed: usize, available: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("price {price} outside no-arbitrage bounds [{lower}, {upper}]")]
    OutOfBounds { price: f64, lower: f64, upper: f64 },

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("kernel matrix not positive definite after jitter {jitter:e}")]
    SingularKernel { jitter: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("data stage mismatch: {0}")]
    DataStageMismatch(String),

    #[error("no quotes left after filtering ({0})")]
    EmptyAfterFilter(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
