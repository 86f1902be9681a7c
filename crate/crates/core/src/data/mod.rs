//! Annotations, datasets, augmentations and the synthetic gaze task.

mod annotation;
mod augment;
mod image;
mod import;
mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{GazeError, Result};
use crate::prompting::{build_head_mask, HeadMask};
use crate::targets::{build_target_heatmap, TargetHeatmap, DEFAULT_SIGMA};

pub use self::annotation::{load_annotations, save_annotations, AnnotationFormat, GazeAnnotation, Split};
pub use self::augment::{apply_bbox_jitter, apply_crop, apply_hflip, augment, AugmentationConfig, CROP_ATTEMPTS};
pub use self::image::RgbFrame;
pub use self::import::{import_gazefollow, import_video_attention_target};
pub use self::synthetic::{make_synthetic_dataset, SyntheticConfig};

/// Resolutions the per-sample target and head mask are built at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGeometry {
    pub grid: (usize, usize),
    pub out: (usize, usize),
    pub sigma: f64,
}

impl SampleGeometry {
    pub fn new(grid: (usize, usize), out: (usize, usize), sigma: f64) -> Self {
        Self { grid, out, sigma }
    }

    pub fn with_default_sigma(grid: (usize, usize), out: (usize, usize)) -> Self {
        Self::new(grid, out, DEFAULT_SIGMA)
    }
}

/// An image with one person's annotation and the derived target and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: RgbFrame,
    pub annotation: GazeAnnotation,
    pub target: TargetHeatmap,
    pub mask: HeadMask,
}

impl SampleRecord {
    pub fn new(image: RgbFrame, annotation: GazeAnnotation, geometry: &SampleGeometry) -> Result<Self> {
        annotation.validate()?;
        let target = build_target_heatmap(
            annotation.target_point().as_ref(),
            geometry.out.0,
            geometry.out.1,
            geometry.sigma,
        )?;
        let mask = build_head_mask(&annotation.bbox, geometry.grid.0, geometry.grid.1)?;
        Ok(Self {
            image,
            annotation,
            target,
            mask,
        })
    }
}

#[derive(Debug, Clone)]
enum ImageSource {
    Directory(PathBuf),
    Memory(HashMap<String, RgbFrame>),
}

/// Annotations plus the images they refer to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub annotations: Vec<GazeAnnotation>,
    source: ImageSource,
}

impl Dataset {
    /// Images are read from `root.join(image_id)` on demand.
    pub fn from_directory(annotations: Vec<GazeAnnotation>, root: impl Into<PathBuf>) -> Self {
        Self {
            annotations,
            source: ImageSource::Directory(root.into()),
        }
    }

    pub fn in_memory(annotations: Vec<GazeAnnotation>, images: HashMap<String, RgbFrame>) -> Self {
        Self {
            annotations,
            source: ImageSource::Memory(images),
        }
    }

    /// Loads a dataset description. For `synthetic`, `path` is a JSON
    /// [`SyntheticConfig`] and images are rendered in memory; otherwise images
    /// are resolved against `root` (default: the annotation file's directory).
    pub fn load(path: &Path, format: AnnotationFormat, root: Option<&Path>) -> Result<Self> {
        if !path.exists() {
            return Err(GazeError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("annotation file {} not found", path.display()),
            )));
        }
        match format {
            AnnotationFormat::Synthetic => {
                let text = std::fs::read_to_string(path)?;
                let cfg: SyntheticConfig = serde_json::from_str(&text).map_err(|e| GazeError::Parse {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
                make_synthetic_dataset(&cfg)
            }
            AnnotationFormat::GazefollowJson => {
                let annotations = load_annotations(path, format)?;
                let root = root
                    .map(Path::to_path_buf)
                    .or_else(|| path.parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                Ok(Self::from_directory(annotations, root))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn image(&self, image_id: &str) -> Result<RgbFrame> {
        match &self.source {
            ImageSource::Directory(root) => RgbFrame::load(&root.join(image_id)),
            ImageSource::Memory(images) => images.get(image_id).cloned().ok_or_else(|| {
                GazeError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("image `{image_id}` not in dataset"),
                ))
            }),
        }
    }

    /// Keeps only records of one split.
    pub fn filter_split(&self, split: Split) -> Self {
        Self {
            annotations: self.annotations.iter().filter(|a| a.split == split).cloned().collect(),
            source: self.source.clone(),
        }
    }

    /// Annotation indices grouped by image, in order of first appearance.
    pub fn image_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (k, a) in self.annotations.iter().enumerate() {
            match seen.get(a.image_id.as_str()) {
                Some(&g) => order[g].1.push(k),
                None => {
                    seen.insert(&a.image_id, order.len());
                    order.push((a.image_id.clone(), vec![k]));
                }
            }
        }
        order
    }

    pub fn sample(&self, index: usize, geometry: &SampleGeometry) -> Result<SampleRecord> {
        let ann = self
            .annotations
            .get(index)
            .ok_or_else(|| GazeError::OutOfRange(format!("sample {index} of {}", self.len())))?;
        SampleRecord::new(self.image(&ann.image_id)?, ann.clone(), geometry)
    }

    pub fn samples(&self, geometry: &SampleGeometry) -> Result<Vec<SampleRecord>> {
        (0..self.len()).map(|k| self.sample(k, geometry)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_first_appearance() {
        let data = make_synthetic_dataset(&SyntheticConfig {
            n: 3,
            image_size: 112,
            persons_per_image: 2,
            ..Default::default()
        })
        .unwrap();
        let groups = data.image_groups();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[1].1, vec![2, 3]);
    }

    #[test]
    fn directory_dataset_reads_images() {
        let data = make_synthetic_dataset(&SyntheticConfig {
            n: 2,
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut anns = data.annotations.clone();
        for a in &mut anns {
            let file = format!("{}.png", a.image_id);
            data.image(&a.image_id).unwrap().save_png(&dir.path().join(&file)).unwrap();
            a.image_id = file;
        }
        let path = dir.path().join("ann.jsonl");
        save_annotations(&path, &anns).unwrap();
        let loaded = Dataset::load(&path, AnnotationFormat::GazefollowJson, None).unwrap();
        let g = SampleGeometry::with_default_sigma((4, 4), (64, 64));
        let samples = loaded.samples(&g).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].image.height(), 64);
        assert!(Dataset::load(&dir.path().join("missing.jsonl"), AnnotationFormat::GazefollowJson, None).is_err());
    }

    #[test]
    fn synthetic_format_loads_from_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.json");
        std::fs::write(&path, r#"{"n": 3, "image_size": 112, "seed": 4}"#).unwrap();
        let anns = load_annotations(&path, AnnotationFormat::Synthetic).unwrap();
        let data = Dataset::load(&path, AnnotationFormat::Synthetic, None).unwrap();
        assert_eq!(anns, data.annotations);
        assert_eq!(anns.len(), 3);
    }
}
