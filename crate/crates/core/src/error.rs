use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EsmError>;

#[derive(Debug, Error)]
pub enum EsmError {
    #[error("domain error: {0}")]
    Domain(String),

    /// Response value outside the family support. `row` is 1-based.
    #[error("row {row}: {message}")]
    DataValidation { row: usize, message: String },

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("subsample design: {0}")]
    Design(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("ensemble member {index} failed: {source}")]
    Ensemble {
        index: usize,
        #[source]
        source: Box<EsmError>,
    },

    #[error("inference: {0}")]
    Inference(String),

    #[error("experiment rep {rep}: {source}")]
    Experiment {
        rep: usize,
        #[source]
        source: Box<EsmError>,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("unsupported model version {found:?} (expected {expected:?})")]
    Version { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EsmError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        EsmError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn data(row: usize, message: impl Into<String>) -> Self {
        EsmError::DataValidation {
            row,
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        match self {
            EsmError::DataValidation { .. }
            | EsmError::Config { .. }
            | EsmError::Dimension { .. }
            | EsmError::Design(_)
            | EsmError::Format(_)
            | EsmError::Version { .. }
            | EsmError::Io(_) => true,
            EsmError::Ensemble { source, .. } | EsmError::Experiment { source, .. } => {
                source.is_usage()
            }
            EsmError::Domain(_) | EsmError::Training { .. } | EsmError::Inference(_) => false,
        }
    }
}
