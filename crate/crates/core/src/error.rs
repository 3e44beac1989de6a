use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("label out of range: node {node} has label {label} but task {task} declares {num_classes} classes")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        task: usize,
        num_classes: usize,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix not SPD")]
    NotSpd,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than by input data or usage.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotSpd | Error::NonFinite(_))
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
