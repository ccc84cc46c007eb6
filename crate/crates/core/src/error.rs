use thiserror::Error;

/// Errors raised by the feedback-capacity engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid realization: {0}")]
    InvalidRealization(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{what} is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { what: String, min_eig: f64 },

    #[error("{0} is singular or not positive definite")]
    Singular(String),

    #[error("time index {t} out of range for horizon {n}")]
    TimeIndex { t: usize, n: usize },

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("horizon {n} exceeds the matrix-form optimizer guard of {max}")]
    HorizonGuard { n: usize, max: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file: {0}")]
    Schema(String),

    #[error("model file not found: {0}")]
    ModelNotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
