use std::fmt;
use std::path::{Path, PathBuf};

use gazelle_core::GazeError;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config or input descriptions. Exit code 2.
    Usage,
    /// Failure while doing the work. Exit code 1.
    Runtime,
}

/// Error reported by a command, serialized as JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub message: String,
    pub path: Option<PathBuf>,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            code,
            message: message.into(),
            path: None,
        }
    }

    pub fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            code,
            message: message.into(),
            path: None,
        }
    }

    pub fn missing_file(what: &str, path: &Path) -> Self {
        Self::usage("missing_file", format!("{what} {} does not exist", path.display())).with_path(path)
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Runtime => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Runtime => "runtime",
        };
        let mut err = json!({
            "kind": kind,
            "code": self.code,
            "message": self.message,
            "exit_code": self.exit_code(),
        });
        if let Some(p) = &self.path {
            err["path"] = json!(p.display().to_string());
        }
        json!({ "error": err })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<GazeError> for CliError {
    fn from(e: GazeError) -> Self {
        use GazeError::*;
        let message = e.to_string();
        let (kind, code, path) = match &e {
            InvalidConfig(_) => (ErrorKind::Usage, "invalid_config", None),
            InvalidBBox(_) => (ErrorKind::Usage, "invalid_bbox", None),
            InvalidCoordinate(_) => (ErrorKind::Usage, "invalid_coordinate", None),
            VariantMismatch(_) => (ErrorKind::Usage, "variant_mismatch", None),
            UnmatchedParameter(_) => (ErrorKind::Usage, "unmatched_parameter", None),
            AmbiguousParameter(_) => (ErrorKind::Usage, "ambiguous_parameter", None),
            Parse { path, .. } => (ErrorKind::Usage, "parse", Some(path.clone())),
            Validation { .. } => (ErrorKind::Usage, "validation", None),
            MissingWeights { path, .. } => (ErrorKind::Usage, "missing_weights", Some(path.clone())),
            EmptyAnnotations => (ErrorKind::Usage, "empty_annotations", None),
            ShapeMismatch { .. } => (ErrorKind::Runtime, "shape_mismatch", None),
            NotPatchDivisible { .. } => (ErrorKind::Runtime, "not_patch_divisible", None),
            OutOfRange(_) => (ErrorKind::Runtime, "out_of_range", None),
            NoPositives => (ErrorKind::Runtime, "no_positives", None),
            CropExhausted { .. } => (ErrorKind::Runtime, "crop_exhausted", None),
            NonFiniteLoss { .. } => (ErrorKind::Runtime, "non_finite_loss", None),
            Evaluation { .. } => (ErrorKind::Runtime, "evaluation", None),
            Checkpoint(_) => (ErrorKind::Runtime, "checkpoint", None),
            Io(_) => (ErrorKind::Runtime, "io", None),
            Image(_) => (ErrorKind::Runtime, "image", None),
            Json(_) => (ErrorKind::Runtime, "json", None),
        };
        Self {
            kind,
            code,
            message,
            path,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime("json", e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::runtime("image", e.to_string())
    }
}
