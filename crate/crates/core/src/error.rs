//! Error taxonomy shared by the whole toolkit.
//!
//! Every public fallible operation returns [`Result`]. The variants map
//! one-to-one onto the CLI exit codes (see the `tricomp` binary).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data violates a precondition (non-finite entries, bad coordinates).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter (rank, sparsity count, layer index) is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical failure: non-convergence, NaN/Inf loss.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed checkpoint or image bytes. `offset` is the byte position
    /// at which parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
