use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline. The CLI maps families of these onto
/// process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated or malformed file: {0}")]
    Malformed(String),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at frame {frame}, channel {channel}")]
    NonFiniteValue { frame: usize, channel: usize },
    #[error("unknown feature layout id {0}")]
    UnknownLayout(u32),
    #[error("invalid feature layout: {0}")]
    InvalidLayout(String),
    #[error("layout does not define foot joints")]
    LayoutMissingFeet,
    #[error("samples do not share a feature layout")]
    LayoutMismatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} outside schedule range [0, {max}]")]
    ScheduleOutOfRange { t: usize, max: usize },
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("prompt has {0} tokens, more than the 77 allowed")]
    TokenOverflow(usize),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("no embedding for prompt {0:?}")]
    UnknownPrompt(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
