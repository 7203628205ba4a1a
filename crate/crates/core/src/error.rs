use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EmfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EmfError {
    /// A file does not follow its declared layout. `location` is a byte
    /// offset for binary files and a 1-based line number for text files.
    #[error("format error in {path:?} at {location}: {message}")]
    Format {
        path: Option<PathBuf>,
        location: Location,
        message: String,
    },

    /// A record parsed but violates a domain invariant.
    #[error("validation error at {location}: {message}")]
    Validation { location: Location, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Value(String),

    /// An upstream invariant was broken (e.g. an event outside its window).
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
    Record(usize),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte offset {b}"),
            Location::Line(l) => write!(f, "line {l}"),
            Location::Record(r) => write!(f, "record {r}"),
        }
    }
}

impl EmfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EmfError::Io {
            path: Some(path.into()),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        EmfError::Shape(msg.into())
    }
}

impl From<std::io::Error> for EmfError {
    fn from(source: std::io::Error) -> Self {
        EmfError::Io { path: None, source }
    }
}
