use thiserror::Error;

/// Errors raised by any part of the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("root of backward pass must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("malformed WAV file: {0}")]
    Wav(String),

    #[error("protocol line {line}: {msg}")]
    Protocol { line: usize, msg: String },

    #[error("unsupported format version: {0}")]
    Version(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("teacher model required by method `{0}` but none was provided")]
    MissingTeacher(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        op: op.into(),
        detail: detail.into(),
    }
}
