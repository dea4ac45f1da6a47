//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the detection pipeline and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Two boxes (or a box and a covariance) use different parameterizations.
    #[error("parameterization mismatch: {0}")]
    Parameterization(String),

    /// A shape, size, or coordinate is degenerate or inconsistent.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A covariance matrix violates symmetry or positive semi-definiteness.
    #[error("covariance error: {0}")]
    Covariance(String),

    /// An invalid mode/shape combination or inconsistent configuration.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// An operation was applied to an empty cluster.
    #[error("cluster error: {0}")]
    Cluster(String),

    /// Input data is inconsistent (unknown ids, missing fields).
    #[error("data error: {0}")]
    Data(String),

    /// A serialized record references an id that does not resolve.
    #[error("reference error: {0}")]
    Reference(String),

    /// A parsed record fails validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Rejection sampling exhausted its retry budget.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
