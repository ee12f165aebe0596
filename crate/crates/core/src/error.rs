use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("gradient table: {0}")]
    Scheme(String),

    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error("unsupported NIfTI file: {0}")]
    UnsupportedFormat(String),

    #[error("truncated NIfTI data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("mask contains no voxels")]
    EmptyMask,

    #[error("objective diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("no progress: final objective {final_value} exceeds initial {initial}")]
    NoProgress { initial: f64, final_value: f64 },

    #[error("gradient check failed: max relative discrepancy {max} exceeds {tol}")]
    GradientCheck { max: f64, tol: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration errors, 3 for data errors,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::NoProgress { .. } | Error::NonFinite(_) | Error::GradientCheck { .. } => 4,
            _ => 3,
        }
    }
}
