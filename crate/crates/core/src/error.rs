use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::Origin;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error at byte {offset} of {path}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint error in tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("no supervised positions (every label is IGNORE)")]
    NoSupervisedPositions,

    #[error("non-finite loss {loss} at step {step} (epoch {epoch}, first chunk {origin:?})")]
    NonFiniteLoss {
        loss: f64,
        step: usize,
        epoch: usize,
        origin: Option<Origin>,
    },

    #[error("missing prerequisite `{path}`; run stage `{stage}` first")]
    MissingPrerequisite { stage: &'static str, path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn checkpoint(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            tensor: tensor.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingPrerequisite { .. } => 2,
            Error::DuplicateId(_)
            | Error::Integrity(_)
            | Error::Format { .. }
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 3,
            Error::NoSupervisedPositions | Error::NonFiniteLoss { .. } => 4,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, io::Error> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: context(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, serde_json::Error> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Json {
            context: context(),
            source,
        })
    }
}
