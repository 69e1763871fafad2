//! Unified error type for the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty supervision mask: at least one position must be masked in")]
    EmptySupervision,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence of {len} tokens exceeds the model maximum of {max}{}",
            post_id.as_deref().map(|p| format!(" (post {p})")).unwrap_or_default())]
    SequenceTooLong {
        len: usize,
        max: usize,
        post_id: Option<String>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible generation spec: {0}")]
    InfeasibleSpec(String),

    #[error("overlap rate undefined: test split has no gold keyphrases")]
    UndefinedOverlap,

    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("ranking row {row} is not a permutation of 1..={n}")]
    InvalidRanking { row: usize, n: usize },

    #[error("non-finite loss {loss} at step {step} (post {post_id}); aborting: check lr and data")]
    NonFiniteLoss {
        step: usize,
        post_id: String,
        loss: f64,
    },

    #[error("teacher: {0}")]
    Teacher(#[from] crate::cotgen::TeacherError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
