//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offending shapes.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Non-finite or otherwise invalid numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Out-of-range index (token ids, class targets).
    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an API contract (missing gradient, coverage mismatch,
    /// non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; the message may aggregate several issues.
    #[error("config error: {0}")]
    Config(String),

    /// Requested sparsity below the sparsity already present in the prior mask.
    #[error("mask monotonicity violated: requested sparsity {requested} below prior {prior}")]
    MaskMonotonicity { requested: f64, prior: f64 },

    /// Malformed serialized artifact (checkpoint, sparse model, records).
    #[error("format error: {0}")]
    Format(String),

    /// Sequence longer than the model's configured maximum.
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
