use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown phoneme symbol `{0}`")]
    UnknownSymbol(String),
    #[error("phoneme id {0} has no codebook entry")]
    MissingCodebookEntry(usize),
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("signal too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("decoder state used before initialization")]
    UninitializedState,
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("strategy {0} requires a source checkpoint")]
    MissingCheckpoint(String),
    #[error("checkpoint parameter names do not match the model: {0}")]
    NameMismatch(String),
    #[error("label of length {label_len} needs {needed} frames, only {frames} available")]
    InfeasibleLabel {
        label_len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("corpus has no utterance pairs")]
    EmptyCorpus,
    #[error("attention rows are not probability vectors: {0}")]
    NonStochasticRows(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    OutputExists(PathBuf),
    #[error("non-finite loss at step {step}: {detail}")]
    NaNLoss { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error is an I/O failure rather than a violated precondition.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format { .. })
    }
}
