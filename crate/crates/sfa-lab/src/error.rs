use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two objects that must agree in length/shape do not.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// An argument is outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// A file does not conform to its on-disk format.
    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A configuration file or flag set is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An I/O failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
