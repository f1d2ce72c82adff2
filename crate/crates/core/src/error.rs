use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty source under threshold: source {source_index} has zero weighted mass")]
    EmptySource { source_index: usize },

    #[error("every anchor subset has an empty source under the threshold")]
    AllSubsetsEmpty,

    #[error("{sources} sources requested but the model only has {anchors} anchors")]
    TooManySources { sources: usize, anchors: usize },

    #[error("reference signal is zero after mean removal")]
    ZeroReference,

    #[error("source {0} has zero power")]
    ZeroPower(usize),

    #[error("harmonic {highest_hz:.1} Hz reaches Nyquist ({nyquist_hz:.1} Hz)")]
    Nyquist { highest_hz: f64, nyquist_hz: f64 },

    #[error("backward called on a non-scalar node of shape {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
