use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("position {pos} exceeds max_positions {max}")]
    PositionOverflow { pos: usize, max: usize },
    #[error("attention mask is {rows}x{cols}, expected {expected}x{expected}")]
    MaskShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{query_heads} query heads cannot be grouped {group} per key head over {kv_heads} key heads")]
    GroupMismatch {
        query_heads: usize,
        kv_heads: usize,
        group: usize,
    },
    #[error("budget {budget} must exceed sink size {sink}")]
    BudgetTooSmall { budget: usize, sink: usize },
    #[error("eviction of {needed} entries would reach into the sink (body holds {body})")]
    SinkViolation { needed: usize, body: usize },
    #[error("tree widths {expected:?} do not match candidate lists of lengths {got:?}")]
    WidthMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("n-gram branch {index} is invalid: {reason}")]
    NGramLengthMismatch { index: usize, reason: String },
    #[error("prompt of {len} tokens is too short (need more than {min})")]
    PromptTooShort { len: usize, min: usize },
    #[error("session already produced its target of {target} tokens")]
    SessionExhausted { target: usize },
    #[error("sequence of {len} tokens is too short for {n}-grams")]
    SequenceTooShort { len: usize, n: usize },
    #[error("malformed weights: {0}")]
    Weights(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
