use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or axes that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration values or combinations.
    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Values outside the mathematical domain of an operation.
    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset or checkpoint file whose content is inconsistent.
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("degenerate stream `{0}`: standard deviation is zero")]
    DegenerateStream(String),

    #[error("no readout for mouse `{0}`")]
    MissingReadout(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at epoch {epoch} (mouse {mouse}): {msg}")]
    Diverged {
        epoch: usize,
        mouse: String,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
