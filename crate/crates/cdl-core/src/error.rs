//! Error taxonomy shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdlError {
    /// A caller violated an operation's precondition (shape, range, mode).
    #[error("contract violation: {0}")]
    Contract(String),
    /// An input is mathematically degenerate (e.g. zero-norm vector into a
    /// cosine similarity).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// A tensor handle was used with a tape that did not create it.
    #[error("tape error: {0}")]
    Tape(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A loss builder produced different values on repeated evaluation.
    #[error("determinism error: {0}")]
    Determinism(String),
    /// Inconsistent experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A metric is undefined for the given inputs (e.g. forgetting with T=1).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Training read a sample outside the current task's partition.
    #[error("rehearsal audit violation: {0}")]
    RehearsalViolation(String),
    /// Malformed weights or dataset file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CdlError>;
