use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("memory capacity exceeded: {requested} positions requested, limit is {limit}")]
    Capacity { limit: usize, requested: usize },

    #[error("capacity exceeded at turn {turn}: {source}")]
    TurnCapacity {
        turn: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unresolved placeholder [{0}]")]
    UnresolvedPlaceholder(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for both plain and turn-annotated capacity errors.
    pub fn is_capacity(&self) -> bool {
        matches!(self, Error::Capacity { .. } | Error::TurnCapacity { .. })
    }
}
