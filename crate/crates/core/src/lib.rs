//! Character-conditioned neural vocoder for voice anonymisation.
//!
//! A ConvNeXt/iSTFT vocoder turns acoustic tokens into audio; after every
//! block a FiLM layer scales and shifts the features with per-character
//! embeddings taken from a frozen CTC recogniser's frame-level output. The
//! vocoder is trained on log-mel, hinge-GAN, feature-matching and CTC losses.

pub mod asr;
pub mod audio;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod ctc;
pub mod data;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod symbols;
pub mod training;
pub mod vocoder;

pub use asr::{PosteriorGrid, Recogniser, RecogniserConfig};
pub use audio::Waveform;
pub use conditioning::{ConditioningLayer, EmbeddingDictionary, FeatureMap};
pub use error::{Error, Result};
pub use exec::Execution;
pub use losses::{DiscriminatorBank, DiscriminatorConfig, LossWeights};
pub use symbols::{CharSequence, CharVocabulary, LabelSequence};
pub use training::{Schedule, Trainer, TrainingTriplet};
pub use vocoder::{AcousticTokenGrid, Generator, VocoderConfig};
