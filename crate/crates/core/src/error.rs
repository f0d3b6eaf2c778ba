use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter containers (or adapter lists) do not share a layout.
    #[error("shape mismatch at block `{block}`: {detail}")]
    ShapeMismatch { block: String, detail: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A mathematical precondition that upstream code is supposed to
    /// guarantee did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for bad configuration or arguments, 3 for a
    /// violated invariant, 4 for I/O and file-format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Data(_) | Error::Empty(_) | Error::Json(_) => 2,
            Error::Invariant(_) | Error::ShapeMismatch { .. } => 3,
            Error::Io(_) | Error::Format(_) | Error::Checksum { .. } => 4,
        }
    }

    pub(crate) fn shape(block: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            block: block.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
