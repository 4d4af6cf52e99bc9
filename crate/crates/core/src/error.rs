use std::path::PathBuf;

use thiserror::Error;

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
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document {doc_id}: {message}")]
    InvalidDocument { doc_id: String, message: String },

    #[error("unknown document id {0:?}")]
    UnknownDocument(String),

    #[error("unknown entity label {label:?} for scheme {scheme}")]
    UnknownLabel { scheme: String, label: String },

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("cannot compare F1 values on different scales")]
    MixedScale,

    #[error("value {value} outside the {scale} range")]
    OutOfRange { value: f64, scale: &'static str },

    #[error("relation has no surface text")]
    MissingRelation,

    #[error("protocol error in batch {batch:?}: {message}")]
    Protocol { batch: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} failed{}: {source}", fmt_ids(.ids))]
    Stage {
        stage: &'static str,
        ids: Vec<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn protocol(batch: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Protocol {
            batch: batch.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for wire-protocol failures, 1 for
    /// everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Protocol { .. } => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

fn fmt_ids(ids: &[String]) -> String {
    if ids.is_empty() {
        String::new()
    } else {
        format!(" on [{}]", ids.join(", "))
    }
}
