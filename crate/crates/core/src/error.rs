use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite input value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("anomalies overlap at cell (t={t}, dim={dim})")]
    Overlap { t: usize, dim: usize },

    #[error("position encoding requires an even width, got {0}")]
    OddWidth(usize),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("too few excesses over the initial threshold: {found} < {required}")]
    TooFewExcesses { found: usize, required: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("ground truth must contain both classes")]
    DegenerateTruth,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no timestamp has an anomalous ground-truth dimension")]
    NoAnomalousTimestamps,

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
