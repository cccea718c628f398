//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A note, frame index, or pitch fell outside the valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Tensor/roll shapes or grids disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Incompatible representation between two artifacts (e.g. a
    /// checkpoint trained on one state set and a roll encoded in another).
    #[error("representation mismatch: expected {expected}, got {got}")]
    RepMismatch { expected: String, got: String },

    /// Bad configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed Standard MIDI File data.
    #[error("MIDI parse error at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },

    /// Malformed binary dump or checkpoint container.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Training aborted (non-finite loss).
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    /// Bad input data (empty audio, non-finite samples, invalid one-hots).
    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
