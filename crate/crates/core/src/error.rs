use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: shape {0:?} overflows the address space")]
    Size(Vec<usize>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors raised while decoding tensor files and checkpoints.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },

    #[error("length error: {0}")]
    Length(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    Dtype { expected: String, found: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing parameter `{0}` in checkpoint")]
    MissingParam(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
