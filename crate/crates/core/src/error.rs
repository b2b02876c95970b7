use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad parameters, missing data).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// A trace row names a node or function type that the mapping does not know.
    #[error("mapping error: {0}")]
    Mapping(String),

    /// An operation was called in a state its contract forbids.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A runtime invariant check failed during a simulation.
    #[error("invariant violated at interval {interval}: {msg}")]
    Invariant { interval: u32, msg: String },

    #[error("instance too large: {size} enumerable states exceeds the cap of {cap}")]
    InstanceTooLarge { size: u64, cap: u64 },

    /// A per-request record exceeded its worst-case bound.
    #[error("competitive bound violated: {0}")]
    BoundViolation(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
