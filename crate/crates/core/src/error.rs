use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction and decomposition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ray setup error: {0}")]
    Ray(String),

    #[error("gradient graph error: {0}")]
    Graph(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("pyramid error: {0}")]
    Pyramid(String),

    #[error("clustering error: {0}")]
    Cluster(String),

    #[error("synthetic scene error: {0}")]
    Synth(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Image { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
