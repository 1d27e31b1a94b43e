use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("non-finite value in oracle output at class {class}")]
    NonFinite { class: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),

    #[error("invalid hierarchy level: {0}")]
    InvalidLevel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model file is missing section `{0}`")]
    MissingSection(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no records to aggregate")]
    EmptyRecords,

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
}
