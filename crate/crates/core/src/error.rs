use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate sample id `{id}` on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },

    #[error("manifest id `{0}` not found in long corpus")]
    DanglingId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value for sample `{0}`")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error("backends are not homologous-comparable: {0}")]
    NotHomologous(String),

    #[error("score cache is incomplete; {} missing key(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    IncompleteCache(Vec<String>),

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for backend failures, 1 for everything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Gateway(_) => 2,
            _ => 1,
        }
    }
}
