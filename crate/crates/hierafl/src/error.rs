//! One error type for the whole crate.
//!
//! Every fallible public function returns [`Result`]. Variants carry enough
//! context (op name, offending dimensions, file offsets) that the CLI can
//! print a single useful line and exit.

use std::path::PathBuf;

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array construction rejected (empty dims, zero-sized axis, non-finite values).
    #[error("invalid array: {0}")]
    InvalidArray(String),

    /// Operand shapes incompatible with an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument outside its documented domain (negative lr, bad fraction, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Parameter-name lookups that miss, or stores with unexpected contents.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Dataset construction or loading failures other than raw I/O.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed checkpoint bytes (bad magic, truncation, name encoding).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Config parse or validation failure; carries a `section.key` path when known.
    #[error("config error: {0}")]
    Config(String),

    /// Protocol-level misuse (empty buffers, unknown device, capability out of range).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Filesystem failure with the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
