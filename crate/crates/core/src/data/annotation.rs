use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::prompting::HeadBBox;
use crate::targets::GazePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One person in one image.
///
/// Interchange schema, one JSON object per line:
///
/// | field | meaning |
/// |---|---|
/// | `image_id` | image path relative to the dataset root (or a synthetic id) |
/// | `bbox` | `{xmin, ymin, xmax, ymax}` head box, normalized |
/// | `gaze_points` | list of `{x, y}`, normalized; empty when out of frame |
/// | `in_frame` | whether the gaze target is inside the image |
/// | `split` | `train` or `test` |
/// | `image_size` | optional `[width, height]`; when present, `bbox` and `gaze_points` are in pixels |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeAnnotation {
    pub image_id: String,
    pub bbox: HeadBBox,
    pub gaze_points: Vec<GazePoint>,
    pub in_frame: bool,
    pub split: Split,
}

impl GazeAnnotation {
    /// Lists every violated invariant.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.image_id.is_empty() {
            out.push("image_id: empty".to_string());
        }
        if let Err(e) = self.bbox.validate() {
            out.push(format!("bbox: {e}"));
        }
        for (k, p) in self.gaze_points.iter().enumerate() {
            if p.validate().is_err() {
                out.push(format!("gaze_points[{k}]: ({}, {}) outside [0, 1]", p.x, p.y));
            }
        }
        match (self.in_frame, self.gaze_points.len(), self.split) {
            (false, n, _) if n > 0 => out.push("gaze_points: must be empty when in_frame is false".into()),
            (true, 0, _) => out.push("gaze_points: in-frame record needs at least one point".into()),
            (true, n, Split::Train) if n > 1 => out.push(format!("gaze_points: train record has {n} points, expected 1")),
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.problems();
        if fields.is_empty() {
            Ok(())
        } else {
            Err(GazeError::Validation {
                record: self.image_id.clone(),
                fields,
            })
        }
    }

    /// Mean of the annotated gaze points.
    pub fn mean_gaze(&self) -> Option<GazePoint> {
        if self.gaze_points.is_empty() {
            return None;
        }
        let n = self.gaze_points.len() as f64;
        Some(GazePoint {
            x: self.gaze_points.iter().map(|p| p.x).sum::<f64>() / n,
            y: self.gaze_points.iter().map(|p| p.y).sum::<f64>() / n,
        })
    }

    /// Point used to build the training target.
    pub fn target_point(&self) -> Option<GazePoint> {
        if self.in_frame {
            self.gaze_points.first().copied()
        } else {
            None
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    bbox: HeadBBox,
    #[serde(default)]
    gaze_points: Vec<GazePoint>,
    in_frame: bool,
    split: Split,
    #[serde(default)]
    image_size: Option<[f64; 2]>,
}

impl RawRecord {
    fn normalize(self) -> GazeAnnotation {
        let [w, h] = self.image_size.unwrap_or([1.0, 1.0]);
        GazeAnnotation {
            image_id: self.image_id,
            bbox: HeadBBox {
                xmin: self.bbox.xmin / w,
                ymin: self.bbox.ymin / h,
                xmax: self.bbox.xmax / w,
                ymax: self.bbox.ymax / h,
            },
            gaze_points: self
                .gaze_points
                .into_iter()
                .map(|p| GazePoint { x: p.x / w, y: p.y / h })
                .collect(),
            in_frame: self.in_frame,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// JSON-lines interchange records (see [`GazeAnnotation`]).
    GazefollowJson,
    /// A JSON [`SyntheticConfig`](super::SyntheticConfig); records are generated.
    Synthetic,
}

/// Reads and validates annotations.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<GazeAnnotation>> {
    match format {
        AnnotationFormat::GazefollowJson => read_jsonl(path),
        AnnotationFormat::Synthetic => {
            let cfg: super::SyntheticConfig = serde_json::from_reader(BufReader::new(File::open(path)?))
                .map_err(|e| GazeError::Parse {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            Ok(super::synthetic::generate_annotations(&cfg)?)
        }
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<GazeAnnotation>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| GazeError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        let ann = raw.normalize();
        ann.validate().map_err(|e| match e {
            GazeError::Validation { record, fields } => GazeError::Validation {
                record: format!("{record} (line {})", k + 1),
                fields,
            },
            other => other,
        })?;
        out.push(ann);
    }
    Ok(out)
}

/// Writes normalized JSON-lines records.
pub fn save_annotations(path: &Path, annotations: &[GazeAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
