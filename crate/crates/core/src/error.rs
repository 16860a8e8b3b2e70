use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("unfusable graph: {0}")]
    Unfusable(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("missing file {}", .0.display())]
    Missing(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable category, used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::DegenerateStats(_) => "degenerate",
            Error::Unfusable(_) => "unfusable",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Missing(_) => "missing",
            Error::Io { .. } => "io",
        }
    }
}
