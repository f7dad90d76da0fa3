use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0} in shape (all dimensions must be >= 1)")]
    InvalidDimension(usize),
    #[error("value count mismatch: shape holds {expected} elements, got {actual}")]
    ValueCount { expected: usize, actual: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("spatial dimension {0} is too small for this operation")]
    SpatialTooSmall(usize),
    #[error("odd spatial dimension {0} cannot be max-pooled")]
    OddSpatial(usize),
    #[error("batch norm needs at least 2 elements per channel in train mode, got {0}")]
    InsufficientBatch(usize),
    #[error("input size {h}x{w} is not divisible by 2^{d}")]
    Divisibility { h: usize, w: usize, d: usize },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("label {label} out of range [{min}, {max}]")]
    LabelOutOfRange { label: i64, min: i64, max: i64 },
    #[error("target {0} outside [0, 1]")]
    TargetOutOfRange(f64),
    #[error("empty split `{0}`")]
    EmptySplit(&'static str),
    #[error("model format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated stream")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("malformed image header: {0}")]
    MalformedHeader(String),
    #[error("dimension overflow in image header")]
    DimensionOverflow,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
