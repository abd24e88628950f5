use thiserror::Error;

/// Errors surfaced by the training, scoring and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column {column} has zero norm")]
    ZeroVarianceColumn { column: usize },
    #[error("row {row} duplicates another embedding")]
    DuplicateEmbedding { row: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("distribution length mismatch: expected {expected}, found {found}")]
    DistributionLengthMismatch { expected: usize, found: usize },
    #[error("batch needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("utterance has {frames} frames, crop needs {required}")]
    UtteranceTooShort { frames: usize, required: usize },
    #[error("malformed file at byte {offset}: {reason}")]
    MalformedFile { offset: u64, reason: String },
    #[error("cohort standard deviation {sigma} is degenerate")]
    DegenerateCohort { sigma: f64 },
    #[error("top-k {k} exceeds cohort size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("score set needs both target and nontarget trials")]
    SingleClassInput,
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(offset: u64, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
