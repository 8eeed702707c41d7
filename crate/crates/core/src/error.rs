use thiserror::Error;

/// Errors raised by array operations, network construction and the
/// reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("extent {extent} on axis {axis} is not divisible by {divisor}; pad to {padded}")]
    Indivisible {
        axis: usize,
        extent: usize,
        divisor: usize,
        padded: usize,
    },

    #[error("backward already ran on this tape; call reset before reusing it")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}; step refused")]
    NonFinite(String),

    #[error("container: {msg} at byte offset {offset}")]
    Container { msg: String, offset: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        detail: detail.into(),
    }
}
