use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories surfaced by the pipeline. The CLI maps each category to
/// its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Image {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Short machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}

pub(crate) fn ensure_finite(name: &str, value: f32) -> Result<f32> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{name} is not finite ({value})")))
    }
}
