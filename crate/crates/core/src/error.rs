use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no loadable fonts found in {0}")]
    EmptyFontSet(PathBuf),
    #[error("font `{font}` has no glyph for {ch:?}")]
    MissingGlyph { ch: char, font: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("{0} stream is empty")]
    ExhaustedStream(&'static str),
    #[error("image width {width} yields an empty feature sequence")]
    WidthTooSmall { width: usize },
    #[error("cannot pool an empty feature sequence")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NaNLoss { step: u64, detail: String },
    #[error("error rates of synthetic and real baselines are equal; gap is zero")]
    ZeroGap,
    #[error("reference set is empty or contains an empty reference")]
    EmptyReference,
    #[error("incompatible charset: {0}")]
    IncompatibleCharset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error comes from bad input or configuration rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::IncompatibleCharset(_) | Error::MissingGlyph { .. }
        )
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Decode(e.to_string())
    }
}
