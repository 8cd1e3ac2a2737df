use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("fingerprint mismatch: {0:016x} vs {1:016x}")]
    Fingerprint(u64, u64),
    #[error("numeric failure at step {step}: loss = {loss}")]
    Numeric { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
