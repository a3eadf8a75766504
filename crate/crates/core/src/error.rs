//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset spec: field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("text bank is empty")]
    EmptyTextBank,

    #[error("target kind does not match model head `{head}`")]
    HeadMismatch { head: &'static str },

    #[error("training gate failed for {model}: {metric} = {value:.4} < {threshold:.4}")]
    GateFailure {
        model: String,
        metric: &'static str,
        value: f64,
        threshold: f64,
    },

    #[error("non-finite value in {context}")]
    NumericalFailure { context: String },

    #[error("gradient oracle failed for sample {sample_id}: {source}")]
    OracleFailure {
        sample_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("attack success rate undefined: clean metric {0} is not positive")]
    UndefinedAsr(f64),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    ImageCodec(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::ImageCodec(e.to_string())
    }
}
