//! Crate-wide error types.

use thiserror::Error;

/// Errors raised by model-side operations (encoder, predictor, heads, losses).
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("streaming memory is empty")]
    EmptyMemory,
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("unknown command id {0}")]
    UnknownCommand(u8),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Errors raised by episode generation, rendering and serialization.
#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("agent footprints cannot fit the configured grid: {0}")]
    DoesNotFit(String),
    #[error("frame {0} out of range [{1}, {2}]")]
    FrameOutOfRange(i32, i32, i32),
    #[error("episode manifest malformed: {0}")]
    Manifest(String),
    #[error("unsupported episode format version {0}")]
    UnsupportedVersion(u32),
    #[error("array {name}: expected {expected} bytes, file has {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid label {0} for {1} classes")]
    InvalidLabel(u8, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
