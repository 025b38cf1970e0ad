use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: requires x1 < x2 and y1 < y2 with finite coordinates")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("bag `{bag}`: {field}: {reason}")]
    InvalidBag { bag: String, field: String, reason: String },

    #[error("bag `{bag}`: {field}: expected length {expected}, found {found}")]
    DimensionMismatch {
        bag: String,
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("non-finite {what} at epoch {epoch}, bag `{bag}`")]
    NonFinite { what: String, epoch: usize, bag: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown bag id `{0}`")]
    UnknownBag(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bag(bag: &str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidBag {
            bag: bag.to_string(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidBox { .. } | Error::Shape(_)
        )
    }
}
