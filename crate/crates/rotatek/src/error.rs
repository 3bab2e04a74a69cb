//! Workspace-level error type with process exit-code mapping.

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::cache::CacheError;
use crate::decode::DecodeError;
use crate::harness::config::ConfigError;
use crate::harness::trace::TraceError;
use crate::linalg::LinalgError;
use crate::metrics::MetricsError;
use crate::rotation::RotationError;

/// Top-level error, tagging each failure with its module of origin.
#[derive(Debug, Error)]
pub enum Error {
    #[error("linalg: {0}")]
    Linalg(#[from] LinalgError),
    #[error("rotation: {0}")]
    Rotation(#[from] RotationError),
    #[error("cache: {0}")]
    Cache(#[from] CacheError),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("baselines: {0}")]
    Baseline(#[from] BaselineError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 1 usage, 2 data, 3 numerical breakdown.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Rotation(RotationError::NumericalBreakdown { .. }) => 3,
            Error::Cache(CacheError::Rotation(RotationError::NumericalBreakdown { .. })) => 3,
            _ => 2,
        }
    }
}
