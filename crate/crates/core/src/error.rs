use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside representable range [{lo}, {hi}) for scale 2^-{scale_bits}")]
    Range {
        value: f64,
        lo: f64,
        hi: f64,
        scale_bits: u32,
    },
    #[error("invalid fixed-point scale {0}: must satisfy 0 < s < 32")]
    InvalidScale(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backend mismatch: expected {expected}, got {actual}")]
    BackendMismatch { expected: String, actual: String },
    #[error("triple pool exhausted: requested {requested} beyond budget {budget}")]
    TripleExhausted { requested: u64, budget: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input distribution: {0}")]
    NotNormalized(String),
    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("generation state inconsistent: {0}")]
    StateInconsistent(String),
    #[error("weight file malformed: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
