//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor construction or reshape with an illegal shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two operands whose shapes cannot be combined. Names both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A spatial op whose output size would be < 1.
    #[error("{op}: output size would be {size} for input {input} (kernel footprint {footprint}, stride {stride}, padding {padding})")]
    EmptyOutput {
        op: &'static str,
        input: usize,
        footprint: usize,
        stride: usize,
        padding: usize,
        size: i64,
    },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Scene placement or masking could not produce a valid result.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed text or binary input, with position when known.
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
