use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps [`AgmanError::Argument`], [`AgmanError::Config`] and
/// [`AgmanError::Usage`] to exit code 2 and everything else to exit code 1.
#[derive(Debug, Error)]
pub enum AgmanError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    /// The model cannot produce the requested output, e.g. a map of a disabled stage.
    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl AgmanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AgmanError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than by a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            AgmanError::Argument(_) | AgmanError::Config(_) | AgmanError::Usage(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, AgmanError>;
