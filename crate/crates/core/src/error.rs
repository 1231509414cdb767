use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown symbol {ch:?} at position {position}")]
    UnknownSymbol { ch: char, position: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("conditioning enabled but no character sequence supplied")]
    MissingConditioning,

    #[error("token {token} out of range for codebook size {codebook_size}")]
    TokenOutOfRange { token: u32, codebook_size: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },

    #[error("empty audio")]
    EmptyAudio,

    #[error("audio too short: {samples} samples, need at least {required}")]
    AudioTooShort { samples: usize, required: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("target of {target_len} labels needs {required} frames, only {frames} available")]
    TargetTooLong {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("empty reference")]
    EmptyReference,

    #[error("class {0:?} has no instances")]
    EmptyClass(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// `key` names the offending configuration key when there is one.
    #[error("config: {msg}")]
    Config { key: Option<String>, msg: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn config(key: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.map(str::to_string),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
