use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::capture::SessionManifest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("non-finite result: {0}")]
    NonFiniteResult(String),

    #[error("invalid anchor spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("invalid state: {0}")]
    StateError(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("parse error at line {line} (<{element}>): {message}")]
    ParseError {
        line: usize,
        element: String,
        message: String,
    },

    #[error("schema error: missing or invalid <{0}>")]
    SchemaError(String),

    #[error("validation error: {0}")]
    ValidationError(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("decode error at byte {offset}: {message}")]
    DecodeError { offset: usize, message: String },

    #[error("corrupt record #{index}: {reason}")]
    CorruptRecord { index: usize, reason: String },

    #[error("truncated record file at record #{index}")]
    TruncatedFile { index: usize },

    #[error("capture session aborted after {} frames: {reason}", manifest.entries.len())]
    SessionAborted {
        reason: String,
        manifest: Box<SessionManifest>,
    },

    #[error("source exhausted")]
    SourceExhausted,

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Variant name, stable for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateBox(_) => "DegenerateBox",
            Error::NonFiniteResult(_) => "NonFiniteResult",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidInput(_) => "InvalidInput",
            Error::ShapeError(_) => "ShapeError",
            Error::StateError(_) => "StateError",
            Error::NotFound(_) => "NotFound",
            Error::CorruptCheckpoint { .. } => "CorruptCheckpoint",
            Error::ParseError { .. } => "ParseError",
            Error::SchemaError(_) => "SchemaError",
            Error::ValidationError(_) => "ValidationError",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::DecodeError { .. } => "DecodeError",
            Error::CorruptRecord { .. } => "CorruptRecord",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::SessionAborted { .. } => "SessionAborted",
            Error::SourceExhausted => "SourceExhausted",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    /// True for errors caused by bad input data or configuration, as opposed
    /// to IO failures or corrupted files.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_)
                | Error::CorruptCheckpoint { .. }
                | Error::CorruptRecord { .. }
                | Error::TruncatedFile { .. }
                | Error::NotFound(_)
                | Error::SessionAborted { .. }
        )
    }
}
