use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{name} = {value} is outside {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("lower confidence bound {p_lower} does not exceed 1/2; no radius can be certified")]
    NotCertifiable { p_lower: f64 },

    #[error("dimension {d} is below the lemma threshold {threshold:.4} for this configuration")]
    BelowThreshold { d: usize, threshold: f64 },

    #[error("{}: bad IDX magic, expected {expected:#010x}, found {actual:#010x}", path.display())]
    MagicMismatch {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("{}: truncated IDX payload, expected {expected} bytes, found {actual}", path.display())]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed CSV input: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by user input rather than by a computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Domain { .. }
                | Error::BelowThreshold { .. }
                | Error::DimensionMismatch { .. }
                | Error::Schema(_)
        )
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
