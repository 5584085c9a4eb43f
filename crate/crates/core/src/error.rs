use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {context} (tensor {tensor}, index {index})")]
    NonFinite {
        context: &'static str,
        tensor: usize,
        index: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid training config: {0}")]
    InvalidTrainingConfig(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("position {0} does not hold the mask token")]
    NotMasked(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("record {0} is not annotated with word errors")]
    NotAnnotated(String),

    #[error("missing PLL entries for {count} sequences, first: {first:?}")]
    MissingPll { count: usize, first: Vec<String> },

    #[error("malformed data in {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
