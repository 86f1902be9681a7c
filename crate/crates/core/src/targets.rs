//! Ground-truth heatmaps and the training objective.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::decoder::{GazeHeatmap, InOutScore, PersonOutput};
use crate::error::{GazeError, Result};
use crate::real::Real;

/// Prediction clamp used inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-6;
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Normalized gaze location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
}

impl GazePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let p = Self { x, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(GazeError::InvalidCoordinate(format!(
                "gaze point ({}, {}) outside [0, 1]",
                self.x, self.y
            )));
        }
        Ok(())
    }

    /// Pixel whose center is nearest to the point on a `height × width` grid.
    pub fn nearest_pixel(&self, height: usize, width: usize) -> (usize, usize) {
        (nearest_index(self.y, height), nearest_index(self.x, width))
    }

    pub fn mirrored(&self) -> Self {
        Self { x: 1.0 - self.x, y: self.y }
    }
}

fn nearest_index(v: f64, n: usize) -> usize {
    ((v * n as f64 - 0.5).round().max(0.0) as usize).min(n - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetHeatmap {
    pub data: Array2<f64>,
    pub sigma: f64,
}

impl TargetHeatmap {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Peak-normalized Gaussian of width `sigma` pixels centered on the gaze
/// pixel; all zeros when the target is outside the frame.
pub fn build_target_heatmap(point: Option<&GazePoint>, height: usize, width: usize, sigma: f64) -> Result<TargetHeatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GazeError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(GazeError::InvalidConfig("target size must be positive".into()));
    }
    let Some(point) = point else {
        return Ok(TargetHeatmap {
            data: Array2::zeros((height, width)),
            sigma,
        });
    };
    point.validate()?;
    let (ci, cj) = point.nearest_pixel(height, width);
    let denom = 2.0 * sigma * sigma;
    let data = Array2::from_shape_fn((height, width), |(i, j)| {
        let di = i as f64 - ci as f64;
        let dj = j as f64 - cj as f64;
        (-(di * di + dj * dj) / denom).exp()
    });
    Ok(TargetHeatmap { data, sigma })
}

/// Weight `λ` of the in/out term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(GazeError::InvalidConfig(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn video_attention_target() -> Self {
        Self { lambda: 1.0 }
    }

    pub fn childplay() -> Self {
        Self { lambda: 0.1 }
    }
}

/// `−[t·ln p + (1−t)·ln(1−p)]` with `p` clamped to `[ε, 1−ε]`.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to `p`; zero where the clamp is active.
pub fn bce_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    (p - t) / (p * (1.0 - p))
}

/// Mean pixel-wise BCE and its gradient with respect to `pred`.
pub fn heatmap_bce<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<T>)> {
    if pred.dim() != target.dim() {
        return Err(GazeError::shape(
            "heatmap loss",
            format!("{:?}", target.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let p = p.to_f64();
        loss += bce(p, t);
        *g = T::of(bce_grad(p, t) / n);
    });
    Ok((loss / n, grad))
}

pub fn loss_heatmap(pred: &GazeHeatmap, target: &TargetHeatmap) -> Result<f64> {
    Ok(heatmap_bce(pred.data().view(), target.data.view())?.0)
}

/// `L_hm + λ·L_in/out`; the in/out prediction and label must both be present
/// or both absent.
pub fn loss_multitask(
    pred_hm: &GazeHeatmap,
    target_hm: &TargetHeatmap,
    pred_inout: Option<InOutScore>,
    label_inout: Option<bool>,
    weights: LossWeights,
) -> Result<f64> {
    let hm = loss_heatmap(pred_hm, target_hm)?;
    match (pred_inout, label_inout) {
        (Some(p), Some(l)) => Ok(hm + weights.lambda * bce(p.value(), f64::from(u8::from(l)))),
        (None, None) => Ok(hm),
        _ => Err(mismatched_presence()),
    }
}

fn mismatched_presence() -> GazeError {
    GazeError::InvalidConfig("in/out prediction and label must be given together".into())
}

/// Loss terms and output gradients for one person.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub total: f64,
    pub heatmap: f64,
    pub inout: Option<f64>,
    pub d_heatmap: Array2<T>,
    pub d_inout: Option<T>,
}

/// Multitask loss and its gradient with respect to the decoder outputs.
///
/// A label without an in/out prediction is ignored (the decoder has no task
/// token); a prediction without a label contributes nothing.
pub fn loss_grad<T: Real>(
    out: &PersonOutput<T>,
    target: &TargetHeatmap,
    label_inout: Option<bool>,
    weights: LossWeights,
) -> Result<LossGrad<T>> {
    let (heatmap, d_heatmap) = heatmap_bce(out.heatmap.view(), target.data.view())?;
    let (inout, d_inout) = match (out.inout, label_inout) {
        (Some(p), Some(l)) => {
            let (p, t) = (p.to_f64(), f64::from(u8::from(l)));
            (Some(bce(p, t)), Some(T::of(weights.lambda * bce_grad(p, t))))
        }
        _ => (None, None),
    };
    Ok(LossGrad {
        total: heatmap + weights.lambda * inout.unwrap_or(0.0),
        heatmap,
        inout,
        d_heatmap,
        d_inout,
    })
}
