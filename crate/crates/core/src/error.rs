use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GazeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("image of {height}x{width} is not divisible by patch size {patch}")]
    NotPatchDivisible {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("weights for backbone `{name}` not found at {}", path.display())]
    MissingWeights { name: String, path: PathBuf },

    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("head variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty annotation list")]
    EmptyAnnotations,

    #[error("no positive labels")]
    NoPositives,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{record}` failed validation: {}", fields.join(", "))]
    Validation { record: String, fields: Vec<String> },

    #[error("no valid crop window after {attempts} attempts")]
    CropExhausted { attempts: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("parameter `{0}` is not matched by any parameter group")]
    UnmatchedParameter(String),

    #[error("parameter `{0}` is matched by more than one parameter group")]
    AmbiguousParameter(String),

    #[error("{} of {total} samples failed: {}", failures.len(), failures.join("; "))]
    Evaluation { total: usize, failures: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GazeError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        GazeError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
