use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte {offset}: expected {expected:?}")]
    BadMagic { offset: usize, expected: &'static str },
    #[error("truncated payload at byte {offset}: need {needed} more bytes")]
    TruncatedPayload { offset: usize, needed: usize },
    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("label {value} at pixel {pixel} is out of range for {num_classes} classes")]
    IndexOutOfRange {
        pixel: usize,
        value: u32,
        num_classes: usize,
    },
    #[error("palette has {got} entries, label map has {expected} classes")]
    PaletteSizeMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("relevant class set is empty")]
    EmptyRelevantSet,
    #[error("theta must be positive, got {0}")]
    NonPositiveTheta(f64),
    #[error("image {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("theta candidate grid is empty")]
    EmptyCandidateGrid,
    #[error("target superpixel count {target} exceeds pixel count {pixels}")]
    TargetTooLarge { target: usize, pixels: usize },
    #[error("image is empty")]
    EmptyImage,
    #[error("no seeded superpixels")]
    EmptySeedSet,
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize, trace: Vec<f64> },
    #[error("shape {index} lies outside the canvas")]
    ShapeOutOfCanvas { index: usize },
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
