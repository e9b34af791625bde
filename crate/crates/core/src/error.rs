use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: index {index} at position {position} is out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, position: usize, index: usize, bound: usize },

    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("no supervision: weak label set is empty")]
    NoSupervision,

    #[error("{op}: row {row} is not a valid distribution ({detail})")]
    InvalidDistribution { op: &'static str, row: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance factorization failed for class {class} after jitter escalation")]
    Factorization { class: usize },

    #[error("scene packing infeasible after {attempts} attempts")]
    Packing { attempts: usize },

    #[error("non-finite loss at step {step}; config: {config}")]
    NonFinite { step: usize, config: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
