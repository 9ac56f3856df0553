use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // audio + features
    #[error("unsupported sample rate {0} Hz (expected 16000 Hz)")]
    UnsupportedSampleRate(u32),
    #[error("malformed WAV file: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("clip `{id}` is too short ({seconds:.3} s, need at least 0.5 s)")]
    ClipTooShort { id: String, seconds: f64 },

    // nn
    #[error("incompatible dimensions between layer {index} and the previous layer: {detail}")]
    IncompatibleDims { index: usize, detail: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("forward cache does not belong to the current model parameters")]
    StaleCache,
    #[error("model needs at least two parametric layers to expose a penultimate activation")]
    TooShallow,

    // mil
    #[error("bag `{0}` has no instances")]
    EmptyBag(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bag prediction was not produced by this model and bag")]
    StalePrediction,
    #[error("class {0} has no positive samples")]
    EmptyClass(usize),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("loss diverged (non-finite) at epoch {epoch}, bag `{bag}`")]
    DivergedLoss { epoch: usize, bag: String },

    // embedding file
    #[error("bad magic: expected \"MILE\"")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedEmbeddingVersion(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("clip `{clip}`: vector length {got} does not match dimension {expected}")]
    DimMismatch {
        clip: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate clip id `{0}`")]
    DuplicateClip(String),
    #[error("clips missing from embedding set: {}", .0.join(", "))]
    MissingClip(Vec<String>),

    // evaluation and fusion
    #[error("no results to evaluate")]
    EmptyResults,
    #[error("clip `{0}` has no reference label")]
    NoReferenceLabel(String),
    #[error("all fusion weights are zero")]
    AllZeroWeights,
    #[error("all validation scores are zero")]
    AllZeroScores,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    // manifest and model files
    #[error("line {line}: duplicate clip id `{id}`")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { label: String, line: usize },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model file version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u64, supported: u64 },
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by caller configuration rather than by input data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
