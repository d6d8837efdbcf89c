use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    Rejected(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },

    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn reject<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Rejected(msg.into()))
}
