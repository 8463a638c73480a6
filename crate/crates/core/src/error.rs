use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer spec: {0}")]
    Spec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated file, expected {expected} bytes of payload but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evolution strategy: {0}")]
    Es(String),

    #[error("training failed: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 1,
            Error::Magic { .. } | Error::Truncated { .. } | Error::Io { .. } | Error::Dataset(_) => 2,
            Error::Shape(_) | Error::Label { .. } | Error::Empty(_) | Error::Es(_) | Error::Training(_) => 3,
        }
    }
}
