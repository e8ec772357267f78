//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes. Carries both shapes so the
    /// message pinpoints the offender.
    #[error("{op}: shape mismatch ({left} vs {right})")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A scalar or structural argument was out of range.
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A configuration failed validation before any computation ran.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Config file parse failure with a 1-based line number.
    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    /// Corpus file parse failure with a 1-based line number.
    #[error("corpus parse error at line {line}: {msg}")]
    CorpusParse { line: usize, msg: String },

    /// A checkpoint file was malformed, truncated, or of an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A pipeline stage was invoked before the stage that produces its input.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
