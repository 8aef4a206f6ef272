use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: {eligible} eligible users, need at least {required}")]
    InsufficientData { eligible: usize, required: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("negative pool is empty")]
    EmptyNegatives,

    #[error("degenerate batch: row {row} has no unmasked negatives")]
    DegenerateBatch { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::EmptyDataset
            | Error::InsufficientData { .. }
            | Error::IndexOutOfRange { .. } => ErrorClass::Data,
            Error::Shape(_)
            | Error::Domain(_)
            | Error::EmptyNegatives
            | Error::DegenerateBatch { .. }
            | Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}
