use thiserror::Error;

use crate::knowledge_model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("document content is not valid UTF-8 (first invalid byte at offset {offset})")]
    Encoding { offset: usize },

    #[error("parsed document {parsed} does not belong to source {source_ref}")]
    ProvenanceMismatch { parsed: String, source_ref: String },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("upstream model failure ({role}): {message}")]
    Upstream {
        role: String,
        message: String,
        /// Segment that was being summarized when the failure happened.
        segment_id: Option<usize>,
    },

    #[error("knowledge unit failed validation: {0}")]
    Validation(ValidationReport),

    #[error("malformed index file {file} at byte {offset}: {message}")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("could not parse judge response; unparsed lines: {lines:?}")]
    JudgeParse { lines: Vec<String> },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
