use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error in {op}: {reason}")]
    Shape { op: &'static str, reason: String },

    #[error("invalid argument to {op}: {reason}")]
    Argument { op: &'static str, reason: String },

    #[error("network config error at layer '{layer}': {reason}")]
    Layer { layer: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("allocation error: group {group} {reason}")]
    Allocation { group: usize, reason: String },

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("data error in {source_name} at byte {offset}: {reason}")]
    Data {
        source_name: String,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Argument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            reason: reason.into(),
        }
    }
}
