use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WlacError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("special token {0} cannot be scored")]
    SpecialToken(u32),
    #[error("no candidate word starts with {typed:?}")]
    NoCandidate { typed: String },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("a baseline model is required for {0}")]
    MissingBaseline(&'static str),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WlacError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WlacError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            WlacError::Io { .. } => "io",
            WlacError::Parse { .. } => "parse",
            WlacError::InvalidArgument(_) => "invalid-argument",
            WlacError::IdOutOfRange { .. } => "id-out-of-range",
            WlacError::SequenceTooLong { .. } => "sequence-too-long",
            WlacError::SpecialToken(_) => "special-token",
            WlacError::NoCandidate { .. } => "no-candidate",
            WlacError::VocabularyMismatch(_) => "vocabulary-mismatch",
            WlacError::Diverged { .. } => "diverged",
            WlacError::MissingBaseline(_) => "missing-baseline",
            WlacError::Version { .. } => "version",
            WlacError::Corrupt(_) => "corrupt-checkpoint",
            WlacError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, WlacError>;
