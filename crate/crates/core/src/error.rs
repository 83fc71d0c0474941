//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation; names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk data (checkpoints, CIFAR files, CSV).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid transfer plan.
    #[error("plan error: {0}")]
    Plan(String),

    /// A loss or parameter became NaN/Inf; the run aborts.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn plan(msg: impl Into<String>) -> Self {
        Error::Plan(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
