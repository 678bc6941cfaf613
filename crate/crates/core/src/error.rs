use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BmmError>;

#[derive(Debug, Error)]
pub enum BmmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file does not parse under its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// The data parsed but violates an invariant (duplicate ids, NaN, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    #[error("incompatible file version: found {found}, supported {supported}")]
    Incompatible { found: u32, supported: u32 },

    /// An enumeration oracle was asked to go past its size limit.
    #[error("refused: {0}")]
    Refused(String),
}

impl BmmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BmmError::Io {
            path: path.into(),
            source,
        }
    }
}
