use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("invariant violation for instance {instance_id}: {message}")]
    Invariant { instance_id: i64, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { context: context.into(), message: message.into() }
    }

    pub fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format { format, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
