use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped so the command-line front end can map them onto
/// stable exit codes (see [`Error::class`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("pool has {available} {kind} samples, {requested} requested")]
    InsufficientPool {
        kind: String,
        available: usize,
        requested: usize,
    },

    #[error("integrity check failed for {path}: {msg}")]
    Integrity { path: String, msg: String },

    #[error("non-finite value at step {step}: {msg}")]
    NonFinite { step: u64, msg: String },

    #[error("missing input: {0}")]
    Missing(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    MissingInput,
    Integrity,
    Numeric,
    Other,
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::InsufficientPool { .. } => {
                ErrorClass::Usage
            }
            Error::Missing(_) => ErrorClass::MissingInput,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::MissingInput
            }
            Error::Integrity { .. } | Error::Parse { .. } => ErrorClass::Integrity,
            Error::NonFinite { .. } | Error::Domain { .. } | Error::Shape { .. } => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
