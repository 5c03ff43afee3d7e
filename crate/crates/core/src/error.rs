use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported version {found:#04x} (supported: {supported:?})")]
    Version { found: u8, supported: Vec<u8> },

    #[error("wrong artifact kind: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("need at least {needed} more bytes")]
    Incomplete { needed: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<io::Error> for Error {
    fn from(source: io::Error) -> Self {
        Error::Io {
            context: "i/o".into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
