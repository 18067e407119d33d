//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors surfaced by the simulator.
#[derive(Debug)]
pub enum Error {
    /// Tensor or parameter shapes do not agree. Carries both shapes.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A caller-supplied value violates an operation's precondition.
    InvalidArgument(String),
    /// A configuration file or flag is malformed or inconsistent.
    Config(String),
    /// An operation was invoked in the wrong order (e.g. backward without forward).
    State(String),
    /// A computation produced NaN or Inf where finite values are required.
    NonFinite(String),
    /// Filesystem failure, annotated with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Text-format parse failure with a 1-based line number.
    Parse { path: PathBuf, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(
        context: &'static str,
        expected: impl fmt::Debug,
        got: impl fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "shape mismatch in {context}: expected {expected}, got {got}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error at {}:{line}: {msg}", path.display())
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
