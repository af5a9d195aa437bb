//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("class {class} has {have} samples, need {need}")]
    InsufficientClassSamples { class: usize, have: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("aggregation infeasible for {rule}: {reason}")]
    InfeasibleAggregation { rule: &'static str, reason: String },

    #[error("partition failed: {0}")]
    PartitionFailed(String),

    /// Poisoning the test set removed every sample (single-class data).
    #[error("poisoned test set is empty: every sample carries the target label")]
    EmptyPoisonSet,

    #[error("config validation failed:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("malformed {what}: {detail}")]
    MalformedData { what: &'static str, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
