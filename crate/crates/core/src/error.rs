//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors raised by dataset handling, network construction, training and
/// evaluation. Variants mirror the failure classes of the public operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    /// A file or buffer decoded to a layout other than the expected one
    /// (channel count, bit depth, mismatched pair shapes).
    #[error("format error: {0}")]
    Format(String),
    /// A label value falls outside `[0, n)` for the active palette.
    #[error("label out of range: {0}")]
    LabelRange(String),
    /// A value falls outside the documented numeric range of an operation.
    #[error("value out of range: {0}")]
    Range(String),
    /// A spatial size is incompatible with a network or metric window.
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    /// An API contract was violated (wrong tap count, wrong arity).
    #[error("contract violation: {0}")]
    Contract(String),
    /// The input is degenerate for this metric (e.g. zero variance); the
    /// result is undefined and must be excluded from aggregates.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// Two file sets that must align by id do not.
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
