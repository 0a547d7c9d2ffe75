use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("unknown metabolite `{0}`")]
    Vocabulary(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("data-consistency check failed: {0}")]
    Consistency(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
