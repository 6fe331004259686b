use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("rejected configuration: {0}")]
    RejectedConfig(String),

    #[error("rejected dataset: {0}")]
    RejectedDataset(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{}: parse error at byte {offset}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::RejectedConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}
