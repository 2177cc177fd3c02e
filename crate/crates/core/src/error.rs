use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcrlError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid logits at prefix {prefix:?}: {reason}")]
    InvalidLogits { prefix: Vec<u32>, reason: String },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("policy too large to enumerate: {paths} paths exceeds bound {bound}")]
    EnumerationBound { paths: f64, bound: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("non-finite value at step {step}, question {question_id}: {detail}")]
    NumericalAbort {
        step: usize,
        question_id: u32,
        detail: String,
        dump: Box<serde_json::Value>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DcrlError> = std::result::Result<T, E>;
