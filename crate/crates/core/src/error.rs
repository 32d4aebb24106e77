//! Crate-wide error type.
//!
//! Variants are grouped by the CLI exit code they map to: configuration
//! problems (2), data problems (3) and numerical failures (4).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid class: {0}")]
    InvalidClass(String),

    #[error("unsupported query: {0}")]
    Unsupported(String),

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("hierarchy: {0}")]
    Hierarchy(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("truncated record in {path}: {len} bytes is not a multiple of {record}")]
    Truncated {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("raw label id {0} is not in the learning map")]
    Unmapped(u16),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidClass(_)
            | Error::Unsupported(_)
            | Error::Taxonomy(_)
            | Error::Hierarchy(_)
            | Error::Parse { .. }
            | Error::Config(_)
            | Error::OutOfRange(_)
            | Error::Shape(_) => 2,
            Error::Data(_) | Error::Truncated { .. } | Error::Unmapped(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
