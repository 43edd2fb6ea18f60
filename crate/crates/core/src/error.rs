use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; names both offending shapes.
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token id outside the vocabulary.
    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    /// Sequence longer than the model's configured maximum.
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Malformed input data (task payloads, grammar files, datasets).
    #[error("parse error: {0}")]
    Parse(String),

    /// Data error with file position, for dataset readers.
    #[error("{path}:{line}: {msg}")]
    DataAt {
        path: String,
        line: usize,
        msg: String,
    },

    /// Non-finite values or a numerically impossible request.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// KV-cache lookup for a token that was never decoded.
    #[error("cache miss: token position {0} not in cache")]
    CacheMiss(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
