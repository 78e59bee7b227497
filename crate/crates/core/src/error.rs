use std::path::PathBuf;

/// Errors raised anywhere in the motion synthesis stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate rotation input: {0}")]
    DegenerateInput(String),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    InvalidRotation(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("unknown action {action} (model has {num_actions})")]
    UnknownAction { action: usize, num_actions: usize },
    #[error("empty motion sequence")]
    EmptySequence,
    #[error("duration must be positive")]
    NonPositiveDuration,
    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),
    #[error("fully connected variant only accepts length {expected}, got {got}")]
    FixedLengthOnly { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },
    #[error("action set mismatch: {0}")]
    ActionSetMismatch(String),
    #[error("training diverged at step {step}: non-finite loss")]
    DivergedLoss { step: u64 },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("covariance moments are degenerate")]
    DegenerateMoments,
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient samples: need {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("action mismatch: {0} vs {1}")]
    ActionMismatch(usize, usize),
    #[error("interpolation weight {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn corrupt(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
