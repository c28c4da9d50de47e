use std::io;

use thiserror::Error;

/// Errors raised anywhere in the runtime.
#[derive(Debug, Error)]
pub enum KcError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("fast-tier capacity exceeded: {required} bytes required, limit {limit} bytes")]
    Capacity { required: u64, limit: u64 },

    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl KcError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Self::Argument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Self::State(msg.into())
    }
}

pub type Result<T, E = KcError> = std::result::Result<T, E>;
