//! Crate-wide error type.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library, grouped by what went wrong rather
/// than where.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation.
    Shape(String),
    /// A scalar argument is out of its valid range (k < 1, radius <= 0, ...).
    Param(String),
    /// A structural configuration is invalid (odd channel count, reduction
    /// factor not dividing the channels, unknown class name, ...).
    Config(String),
    /// Data violates an internal consistency requirement (neighbor index
    /// out of range, point count mismatch, ...).
    Integrity(String),
    /// A value is outside the mathematical domain of an operation
    /// (negative input to a square-root based combine rule).
    Domain(String),
    /// Gradient tape misuse (backward from an id the tape never produced).
    Tape(String),
    /// A text input could not be parsed; `line` is 1-based.
    Parse { line: usize, message: String },
    /// Underlying I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Tape(m) => write!(f, "tape error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
            Error::Diverged { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
