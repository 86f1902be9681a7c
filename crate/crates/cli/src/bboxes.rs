//! Head boxes for `predict`, given inline or as a detector output file.
//!
//! Accepted shapes:
//! - `[[xmin, ymin, xmax, ymax], ...]`
//! - `[{"xmin": .., "ymin": .., "xmax": .., "ymax": ..}, ...]`
//! - `[{"bbox": [xmin, ymin, xmax, ymax], "score": ..}, ...]`
//! - `{"units": "pixels", "min_score": 0.5, "boxes": [...]}` wrapping any of the above
//!
//! Coordinates are normalized to `[0, 1]` unless `units` is `pixels`.

use std::path::Path;

use gazelle_core::prompting::HeadBBox;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Normalized,
    Pixels,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum BoxEntry {
    Array([f64; 4]),
    Detection {
        bbox: [f64; 4],
        #[serde(default)]
        score: Option<f64>,
    },
    Named {
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
}

impl BoxEntry {
    fn corners(&self) -> [f64; 4] {
        match *self {
            BoxEntry::Array(c) | BoxEntry::Detection { bbox: c, .. } => c,
            BoxEntry::Named { xmin, ymin, xmax, ymax } => [xmin, ymin, xmax, ymax],
        }
    }

    fn score(&self) -> Option<f64> {
        match *self {
            BoxEntry::Detection { score, .. } => score,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum BoxDocument {
    List(Vec<BoxEntry>),
    Wrapped(Wrapped),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wrapped {
    #[serde(default)]
    units: Units,
    #[serde(default)]
    min_score: Option<f64>,
    boxes: Vec<BoxEntry>,
}

/// Parsed boxes, still in their stated units.
#[derive(Debug, Clone)]
pub struct BoxRequest {
    pub units: Units,
    corners: Vec<[f64; 4]>,
}

impl BoxRequest {
    /// Reads `arg` as inline JSON when it starts with `[` or `{`, otherwise as
    /// a path to a JSON file.
    pub fn parse_arg(arg: &str) -> CliResult<Self> {
        let trimmed = arg.trim_start();
        if trimmed.starts_with('[') || trimmed.starts_with('{') {
            return Self::parse_json(trimmed);
        }
        let path = Path::new(arg);
        if !path.is_file() {
            return Err(CliError::missing_file("bbox file", path));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse_json(&text).map_err(|e| e.with_path(path))
    }

    pub fn parse_json(text: &str) -> CliResult<Self> {
        let doc: BoxDocument = serde_json::from_str(text).map_err(|e| CliError::usage("invalid_bbox", format!("cannot read boxes: {e}")))?;
        let (units, min_score, entries) = match doc {
            BoxDocument::List(b) => (Units::Normalized, None, b),
            BoxDocument::Wrapped(w) => (w.units, w.min_score, w.boxes),
        };
        let corners = entries
            .iter()
            .filter(|b| match (min_score, b.score()) {
                (Some(t), Some(s)) => s >= t,
                _ => true,
            })
            .map(BoxEntry::corners)
            .collect();
        Ok(Self { units, corners })
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    /// Normalized, validated boxes for an image of `width`×`height` pixels.
    pub fn resolve(&self, width: usize, height: usize) -> CliResult<Vec<HeadBBox>> {
        self.corners
            .iter()
            .enumerate()
            .map(|(k, &[x0, y0, x1, y1])| {
                let b = match self.units {
                    Units::Normalized => HeadBBox::new(x0, y0, x1, y1),
                    Units::Pixels => HeadBBox::from_pixels(x0, y0, x1, y1, width as f64, height as f64),
                };
                b.map_err(|e| CliError::usage("invalid_bbox", format!("box {k}: {e}")))
            })
            .collect()
    }
}
