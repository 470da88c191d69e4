use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped into broad kinds (see [`ErrorKind`]) so a front end
/// can map them to stable exit codes.
#[derive(Debug, Error)]
pub enum SbdError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Format,
    Io,
    Numeric,
    State,
}

impl SbdError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            SbdError::InvalidUtf8 { .. }
            | SbdError::Format { .. }
            | SbdError::BadMagic { .. }
            | SbdError::UnsupportedVersion { .. }
            | SbdError::Truncated { .. } => ErrorKind::Format,
            SbdError::Shape(_) | SbdError::Config(_) => ErrorKind::Config,
            SbdError::Numeric(_) => ErrorKind::Numeric,
            SbdError::State(_) => ErrorKind::State,
            SbdError::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        SbdError::Format {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        SbdError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = SbdError> = std::result::Result<T, E>;
