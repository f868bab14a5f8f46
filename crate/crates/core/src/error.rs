use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum GlamError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{name}`: {message}")]
    Parameter { name: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, sample {sample}: loss = {loss}")]
    Divergence {
        epoch: usize,
        sample: usize,
        loss: f64,
    },

    #[error("unknown keypoint label `{0}`")]
    UnknownLabel(String),
}

impl GlamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, GlamError>;
