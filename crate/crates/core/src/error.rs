use std::io;

use thiserror::Error;

/// Reasons a binary artifact (dataset, value grid, checkpoint) failed to decode.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("trailing bytes after end of {context}")]
    TrailingBytes { context: &'static str },
    #[error("invalid field: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("decode error in {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: DecodeError,
    },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("value iteration did not converge after {iterations} sweeps (last sup-norm delta {delta:e})")]
    NonConvergence { iterations: usize, delta: f64 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("rejection sampling failed after {draws} draws")]
    RejectionFailure { draws: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dataset contains a single class: {0}")]
    SingleClass(String),
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { stage: &'static str, path: String },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn decode(path: impl Into<String>, source: DecodeError) -> Self {
        Error::Decode {
            path: path.into(),
            source,
        }
    }
}
