use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dp cell ({n}, {m}): {source}")]
    DpCell {
        n: usize,
        m: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("subnet {shape}: {source}")]
    Subnet {
        shape: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing prerequisite stage `{0}`")]
    MissingStage(String),

    #[error("artifact {path} does not match the run manifest")]
    ArtifactMismatch { path: PathBuf },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
