use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} must be nonnegative and finite, got {value}")]
    NegativeParameter { name: &'static str, value: f64 },

    #[error("truncated tail mass {tail:.3e} at n_max = {n_max} exceeds 1e-6; raise n_max")]
    TailTooLarge { tail: f64, n_max: usize },

    #[error("invalid photon distribution: {0}")]
    InvalidPmf(String),

    #[error("distributions have different supports ({left} vs {right})")]
    SupportMismatch { left: usize, right: usize },

    #[error("mix ratio {0} is outside [0, 1]")]
    MixRatio(f64),

    #[error("quantum efficiency {0} is outside (0, 1]")]
    Efficiency(f64),

    #[error("detector count must be in 1..={max}, got {got}")]
    DetectorCount { got: usize, max: usize },

    #[error("click count {count} exceeds the recorded maximum of {max}")]
    CountOutOfRange { count: usize, max: usize },

    #[error("invalid dataset configuration: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by the physical model (bad parameters, tail
    /// bound, detector limits) as opposed to I/O or training failures.
    pub fn is_physics(&self) -> bool {
        matches!(
            self,
            Error::NegativeParameter { .. }
                | Error::TailTooLarge { .. }
                | Error::InvalidPmf(_)
                | Error::SupportMismatch { .. }
                | Error::MixRatio(_)
                | Error::Efficiency(_)
                | Error::DetectorCount { .. }
                | Error::CountOutOfRange { .. }
        )
    }
}
