//! Crate-wide error type.
//!
//! Every error renders as a single line with a machine-parsable
//! `error[kind]:` prefix followed by human-readable text.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("error[dimension]: {0}")]
    Dimension(String),

    /// Invalid configuration: bad key, bad value, or inconsistent settings.
    #[error("error[config]: {0}")]
    Config(String),

    /// Dataset content is invalid (labels out of range, empty split, ...).
    #[error("error[data]: {0}")]
    Data(String),

    /// A binary file does not match its declared format.
    #[error("error[format]: at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Numerical failure: divergence, non-convergence, non-finite values.
    #[error("error[numeric]: {0}")]
    Numeric(String),

    /// Checkpoint serialization / deserialization failure.
    #[error("error[serialization]: {0}")]
    Serialization(String),

    /// Batch statistics cannot be computed (e.g. batch of one in training).
    #[error("error[statistics]: {0}")]
    Statistics(String),

    #[error("error[io]: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Serialization(_) | Error::Io(_) => 3,
            Error::Dimension(_) | Error::Numeric(_) | Error::Statistics(_) => 4,
        }
    }
}
