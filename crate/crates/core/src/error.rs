use std::path::PathBuf;

use thiserror::Error;

use crate::coordinator::SolveTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("grid too large: {points} points exceeds limit {limit}")]
    GridTooLarge { points: u128, limit: u128 },

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("replay buffer holds {have} transitions, {need} requested")]
    BufferUnderfilled { have: usize, need: usize },

    #[error("episode already finished")]
    EpisodeDone,

    #[error("ADMM aborted at iteration {iteration}: {reason}")]
    AdmmAborted {
        iteration: usize,
        reason: String,
        trace: Box<SolveTrace>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
