use thiserror::Error;

/// Errors raised by ratekit.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed panel CSV. `row` is 1-based and counts the header as row 1.
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// The model cannot be estimated on this data (e.g. rank-deficient design).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A numerical routine failed (non-finite values, series did not converge, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn parse(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            row,
            column: column.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
