use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("tape is empty, nothing to differentiate")]
    EmptyTape,

    #[error("non-finite value produced by {context} (index {index})")]
    NonFinite { context: String, index: usize },

    #[error("non-finite function evaluation at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("CSV column {0:?} not found in header")]
    MissingColumn(String),

    #[error("series is empty after ingestion")]
    EmptySeries,

    #[error("unparsable value at row {row}, column {column:?}")]
    BadValue { row: usize, column: String },

    #[error("timestamps not monotonically increasing at row {0}")]
    NonMonotonicTimestamps(usize),

    #[error("channel {0} has zero variance on the train split")]
    ConstantChannel(usize),

    #[error("split infeasible: {0}")]
    WindowInfeasible(String),

    #[error("patch length {patch_len} exceeds segment length {segment_len}")]
    EmptyPatchSequence {
        patch_len: usize,
        segment_len: usize,
    },

    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadSplitFractions(Vec<f64>),

    #[error("empty batch")]
    EmptyBatch,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("theoretical bound undefined for q = {0} (requires q < 1)")]
    BoundUndefined(f64),

    #[error("growth-rate fit undefined: {0}")]
    GrowthFitUndefined(String),

    #[error("rollout diverged at step {step}; partial trace has {recorded} steps")]
    Diverged { step: usize, recorded: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
