//! One error enum for the whole crate.
//!
//! The CLI maps these onto exit codes: [`Error::Capacity`] exits 2 (a modeled
//! out-of-memory condition, expected behavior for the full-attention baseline
//! past its cap), everything else exits 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimensions do not line up; names both shapes.
    #[error("shape mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called with arguments that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A nested sequence or cache has an ill-formed kind pattern; names the
    /// first offending index.
    #[error("structural error at index {index}: {reason}")]
    Structure { index: usize, reason: String },

    /// A refill selection referenced a summary entry that does not exist, or
    /// repeated one.
    #[error("selection error: {0}")]
    Selection(String),

    /// A serialized file is malformed; names the byte offset of the problem.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// The modeled memory cap was exceeded (the full-attention analogue of an
    /// OOM). Exit code 2 at the CLI.
    #[error("capacity exceeded: {needed} entries over the configured cap of {cap}")]
    Capacity { needed: usize, cap: usize },

    /// The protected summary entries alone no longer fit the working window.
    #[error(
        "working window overflow: {required} protected entries exceed the budget of {budget}; \
         increase the window or use a larger summary interval"
    )]
    Overflow { required: usize, budget: usize },

    /// Training diverged or was misconfigured; names the step.
    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
