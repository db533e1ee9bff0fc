//! ICU clinical prediction benchmarks on MIMIC-shaped CSV tables.
//!
//! The crate covers the full experimental loop: a synthetic cohort generator
//! ([`syngen`]), benchmark construction ([`pipeline`]), hourly discretization
//! with masks and imputation ([`discretize`]), hand-engineered features and
//! linear baselines ([`features`], [`linear`]), LSTM model families built on a
//! small reverse-mode tape ([`rnn`], [`train`]), and evaluation ([`metrics`]).
//! The `icubench` binary ties the stages together.

pub mod cli;
pub mod config;
pub mod discretize;
pub mod features;
pub mod linear;
pub mod metrics;
pub mod pipeline;
pub mod rnn;
pub mod syngen;
pub mod train;
pub mod types;

use std::path::PathBuf;

/// Crate-wide error with a stable exit-code category per failure class, so
/// batch callers can dispatch on the cause without parsing messages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("schema error: {message}")]
    Schema { message: String },
    #[error("invalid value: {message}")]
    Domain { message: String },
    #[error("shape error: {message}")]
    Shape { message: String },
    #[error("metric undefined: {message}")]
    Metric { message: String },
    #[error("training aborted: {message}")]
    Training { message: String },
    #[error("invalid arguments: {message}")]
    Invalid { message: String },
    #[error("evaluating on the test split requires --final")]
    FinalGuard,
}

impl From<ndiff::NdiffError> for Error {
    fn from(e: ndiff::NdiffError) -> Self {
        Error::Shape {
            message: e.to_string(),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain {
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid {
            message: message.into(),
        }
    }

    /// Process exit code for this error category (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid { .. } => 2,
            Error::Io { .. } => 3,
            Error::Csv(_) | Error::Schema { .. } => 4,
            Error::Config { .. } => 5,
            Error::Domain { .. } | Error::Shape { .. } => 6,
            Error::Metric { .. } => 7,
            Error::Training { .. } => 8,
            Error::FinalGuard => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
