use thiserror::Error;

/// Errors raised by the library.
///
/// `Numerical` covers non-finite values and solver breakdowns; everything
/// else is a problem with the caller's inputs or files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error("insufficient anomalies: {0}")]
    Insufficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
