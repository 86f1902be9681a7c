use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SampleGeometry, SampleRecord};
use crate::error::{GazeError, Result};
use crate::prompting::HeadBBox;
use crate::targets::GazePoint;

/// Attempts at drawing a crop window before giving up.
pub const CROP_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub crop: bool,
    /// Side of the crop window as a fraction of the image side.
    pub crop_scale: (f64, f64),
    pub hflip: bool,
    /// Maximum edge displacement as a fraction of the box size.
    pub bbox_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: (0.5, 1.0),
            hflip: true,
            bbox_jitter: 0.1,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            crop: false,
            crop_scale: (1.0, 1.0),
            hflip: false,
            bbox_jitter: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.crop && !self.hflip && self.bbox_jitter == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(GazeError::InvalidConfig(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=0.5).contains(&self.bbox_jitter) {
            return Err(GazeError::InvalidConfig(format!("bbox_jitter {} outside [0, 0.5]", self.bbox_jitter)));
        }
        Ok(())
    }
}

fn rebuild(image: super::RgbFrame, annotation: super::GazeAnnotation, geometry: &SampleGeometry) -> Result<SampleRecord> {
    SampleRecord::new(image, annotation, geometry)
}

/// Mirrors the image and every horizontal coordinate.
pub fn apply_hflip(sample: &SampleRecord, geometry: &SampleGeometry) -> Result<SampleRecord> {
    let mut ann = sample.annotation.clone();
    let b = ann.bbox;
    ann.bbox = HeadBBox {
        xmin: 1.0 - b.xmax,
        ymin: b.ymin,
        xmax: 1.0 - b.xmin,
        ymax: b.ymax,
    };
    for p in &mut ann.gaze_points {
        *p = p.mirrored();
    }
    rebuild(sample.image.flipped_horizontal(), ann, geometry)
}

/// Crops a square-scaled window of side `scale` containing the head-box center
/// and the gaze point, then resizes back to the original resolution.
pub fn apply_crop<R: Rng + ?Sized>(
    sample: &SampleRecord,
    scale: f64,
    rng: &mut R,
    geometry: &SampleGeometry,
) -> Result<SampleRecord> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(GazeError::InvalidConfig(format!("crop scale {scale} outside (0, 1]")));
    }
    let (h, w) = (sample.image.height(), sample.image.width());
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    if (ch, cw) == (h, w) {
        return Ok(sample.clone());
    }
    let ann = &sample.annotation;
    let mut keep: Vec<(f64, f64)> = vec![ann.bbox.center()];
    keep.extend(ann.gaze_points.iter().map(|p| (p.x, p.y)));
    for _ in 0..CROP_ATTEMPTS {
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        let (x0, y0) = (left as f64 / w as f64, top as f64 / h as f64);
        let (sx, sy) = (cw as f64 / w as f64, ch as f64 / h as f64);
        let inside = |(x, y): (f64, f64)| x >= x0 && x <= x0 + sx && y >= y0 && y <= y0 + sy;
        if !keep.iter().all(|&p| inside(p)) {
            continue;
        }
        let fx = |x: f64| ((x - x0) / sx).clamp(0.0, 1.0);
        let fy = |y: f64| ((y - y0) / sy).clamp(0.0, 1.0);
        let mut out = ann.clone();
        out.bbox = HeadBBox {
            xmin: fx(ann.bbox.xmin),
            ymin: fy(ann.bbox.ymin),
            xmax: fx(ann.bbox.xmax),
            ymax: fy(ann.bbox.ymax),
        };
        out.gaze_points = ann
            .gaze_points
            .iter()
            .map(|p| GazePoint { x: fx(p.x), y: fy(p.y) })
            .collect();
        let image = sample.image.crop(top, left, ch, cw).resized(h, w);
        return rebuild(image, out, geometry);
    }
    Err(GazeError::CropExhausted { attempts: CROP_ATTEMPTS })
}

/// Moves each box edge by up to `amplitude` times the box size, then clamps to
/// the unit square and restores edge order.
pub fn apply_bbox_jitter<R: Rng + ?Sized>(
    sample: &SampleRecord,
    amplitude: f64,
    rng: &mut R,
    geometry: &SampleGeometry,
) -> Result<SampleRecord> {
    if !(0.0..=0.5).contains(&amplitude) {
        return Err(GazeError::InvalidConfig(format!("jitter amplitude {amplitude} outside [0, 0.5]")));
    }
    if amplitude == 0.0 {
        return Ok(sample.clone());
    }
    let b = sample.annotation.bbox;
    let (ax, ay) = (amplitude * b.width(), amplitude * b.height());
    let mut shift = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let x1 = (b.xmin + shift(ax)).clamp(0.0, 1.0);
    let x2 = (b.xmax + shift(ax)).clamp(0.0, 1.0);
    let y1 = (b.ymin + shift(ay)).clamp(0.0, 1.0);
    let y2 = (b.ymax + shift(ay)).clamp(0.0, 1.0);
    let mut ann = sample.annotation.clone();
    ann.bbox = HeadBBox {
        xmin: x1.min(x2),
        ymin: y1.min(y2),
        xmax: x1.max(x2),
        ymax: y1.max(y2),
    };
    rebuild(sample.image.clone(), ann, geometry)
}

/// Applies the configured augmentations in the order crop, flip, jitter. A
/// crop that finds no valid window leaves the sample uncropped.
pub fn augment<R: Rng + ?Sized>(
    sample: &SampleRecord,
    cfg: &AugmentationConfig,
    rng: &mut R,
    geometry: &SampleGeometry,
) -> Result<SampleRecord> {
    let mut s = sample.clone();
    if cfg.crop {
        let (lo, hi) = cfg.crop_scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        s = match apply_crop(&s, scale, rng, geometry) {
            Ok(c) => c,
            Err(GazeError::CropExhausted { .. }) => s,
            Err(e) => return Err(e),
        };
    }
    if cfg.hflip && rng.random_bool(0.5) {
        s = apply_hflip(&s, geometry)?;
    }
    if cfg.bbox_jitter > 0.0 {
        s = apply_bbox_jitter(&s, cfg.bbox_jitter, rng, geometry)?;
    }
    Ok(s)
}
