//! Autoregressive multi-state note transcription at desk scale.
//!
//! The crate covers the full loop: note-state representations and frame
//! rolls (`noterep`), MIDI ingestion with sustain-pedal offset elongation
//! (`midi`), log-mel features (`features`), a small autoregressive CRNN
//! trained from scratch (`model`), greedy and pitch-wise beam decoding
//! back to notes (`decode`), transcription metrics and confidence
//! calibration (`metrics`), and a synthetic data generator that makes the
//! whole pipeline trainable without a real piano corpus (`synth`).
//!
//! Numeric code is generic over the scalar type (`Scalar`, implemented
//! for `f32` and `f64`); concrete aliases live at the crate root.

pub mod decode;
pub mod dump;
pub mod error;
pub mod features;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod noterep;
pub mod scalar;
pub mod synth;

pub use error::Error;
pub use scalar::Scalar;

pub use decode::{BeamParams, ProbTensor};
pub use features::{FeatureConfig, FeatureMatrix};
pub use midi::{PedalInterval, Performance};
pub use model::{ModelConfig, ModelParams, RecurrentState};
pub use noterep::{FrameGrid, NoteEvent, Representation, StateLabel, StateRoll};

/// `f32` aliases: the training/inference default.
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type ProbTensor32 = ProbTensor<f32>;
pub type ModelParams32 = ModelParams<f32>;

/// `f64` aliases: used where tests need tight numeric agreement
/// (gradient checks, decoder oracles).
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type ProbTensor64 = ProbTensor<f64>;
pub type ModelParams64 = ModelParams<f64>;

pub type Result<T> = std::result::Result<T, Error>;
