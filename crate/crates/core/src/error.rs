use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum BvmError {
    #[error("parameter coordinate {index} = {value} lies outside the domain box [{lo}, {hi}]")]
    DomainViolation {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported capability: {0}")]
    Unsupported(String),
    #[error("matrix is not positive definite ({context}); eigenvalues: {eigenvalues:?}")]
    NotPositiveDefinite {
        context: String,
        eigenvalues: Vec<f64>,
    },
    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, BvmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> BvmError {
    BvmError::InvalidArgument(msg.into())
}
