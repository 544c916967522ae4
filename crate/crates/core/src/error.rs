use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FexError {
    #[error("invalid tree shape: {0}")]
    InvalidShape(String),

    #[error("operator sequence has {got} slots, shape needs {expected}")]
    SequenceLength { expected: usize, got: usize },

    #[error("slot {slot}: operator index {index} out of range (set has {size} operators)")]
    InvalidOperator { slot: usize, index: usize, size: usize },

    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("degenerate candidate: {0}")]
    DegenerateCandidate(String),

    #[error("metrics undefined: {0}")]
    Metrics(String),

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("empty pool: no candidate was ever scored")]
    EmptyPool,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = FexError> = std::result::Result<T, E>;
