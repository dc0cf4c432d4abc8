use thiserror::Error;

use crate::timeline::TimelineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Timeline(#[from] TimelineError),

    #[error("record `{id}` is invalid: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("event label is empty")]
    EmptyLabel,

    #[error("frame activation has {got} columns, encoder expects {expected}")]
    FrameCountMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss became non-finite at {context}")]
    NonFiniteLoss { context: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("prompt `{prompt_id}` has no candidate from {source_name}")]
    MissingCandidate { prompt_id: String, source_name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, inner: Box::new(self) }
    }

    /// True for errors caused by bad input rather than a failure while
    /// running valid input. Missing or malformed input files count as bad
    /// input.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Timeline(_)
            | Error::InvalidRecord { .. }
            | Error::EmptyLabel
            | Error::FrameCountMismatch { .. }
            | Error::ShapeMismatch(_)
            | Error::EmptyDataset
            | Error::EmptyCorpus
            | Error::MissingCandidate { .. }
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Json(_) => true,
            Error::Stage { inner, .. } => inner.is_validation(),
            Error::Io(e) => matches!(e.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData),
            Error::NonFiniteLoss { .. } => false,
        }
    }
}
