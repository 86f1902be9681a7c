//! Evaluation metrics: heatmap ROC AUC, L2 distances and in/out average precision.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoder::{GazeHeatmap, InOutScore};
use crate::error::{GazeError, Result};
use crate::pipeline::GazeModel;
use crate::targets::GazePoint;

/// Default tolerance radius, in output-grid pixels, for the tolerance protocol.
pub const DEFAULT_TOLERANCE_PX: f64 = 3.0;

/// Aggregate scores over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub auc: f64,
    pub avg_l2: f64,
    pub min_l2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_inout: Option<f64>,
    pub n_samples: usize,
}

/// Single-rater agreement on the GazeFollow test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScores {
    pub auc: f64,
    pub avg_l2: f64,
    pub min_l2: f64,
}

pub const HUMAN_GAZEFOLLOW: ReferenceScores = ReferenceScores {
    auc: 0.924,
    avg_l2: 0.096,
    min_l2: 0.040,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalProtocol {
    /// Positives are the pixels holding any annotated point.
    Gazefollow,
    /// Positives are the pixels within `pixels` of the (mean) gaze pixel.
    Tolerance { pixels: f64 },
}

impl EvalProtocol {
    pub fn from_name(name: &str, tolerance: f64) -> Result<Self> {
        match name {
            "gazefollow" => Ok(Self::Gazefollow),
            "tolerance" => Ok(Self::Tolerance { pixels: tolerance }),
            other => Err(GazeError::InvalidConfig(format!(
                "unknown protocol `{other}` (expected gazefollow or tolerance)"
            ))),
        }
    }
}

/// ROC AUC of `scores` against `positive`, ties counted as half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(GazeError::shape("roc_auc labels", scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 {
        return Err(GazeError::NoPositives);
    }
    if n_neg == 0 {
        return Err(GazeError::OutOfRange("ROC AUC needs at least one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let mean_rank = (k + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * order[k..end].iter().filter(|&&i| positive[i]).count() as f64;
        k = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn heatmap_auc(pred: &GazeHeatmap, mask: &Array2<bool>) -> Result<f64> {
    let scores: Vec<f64> = pred.data().iter().copied().collect();
    let labels: Vec<bool> = mask.iter().copied().collect();
    roc_auc(&scores, &labels)
}

/// GazeFollow AUC: every pixel that contains an annotated point is positive.
pub fn auc_gazefollow(pred: &GazeHeatmap, gaze_points: &[GazePoint]) -> Result<f64> {
    if gaze_points.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    let (h, w) = pred.shape();
    let mut mask = Array2::from_elem((h, w), false);
    for p in gaze_points {
        p.validate()?;
        mask[p.nearest_pixel(h, w)] = true;
    }
    heatmap_auc(pred, &mask)
}

/// AUC with every pixel within `tolerance` pixels of the gaze pixel positive.
pub fn auc_tolerance(pred: &GazeHeatmap, gaze: &GazePoint, tolerance: f64) -> Result<f64> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(GazeError::OutOfRange(format!("tolerance {tolerance} must be positive")));
    }
    gaze.validate()?;
    let (h, w) = pred.shape();
    let (r0, c0) = gaze.nearest_pixel(h, w);
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        let (di, dj) = (i as f64 - r0 as f64, j as f64 - c0 as f64);
        di * di + dj * dj <= tolerance * tolerance
    });
    heatmap_auc(pred, &mask)
}

/// `(avg_l2, min_l2)` from the heatmap argmax to the mean and the nearest annotation.
pub fn l2_metrics(pred: &GazeHeatmap, gaze_points: &[GazePoint]) -> Result<(f64, f64)> {
    if gaze_points.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    let (x, y) = pred.argmax_point();
    let n = gaze_points.len() as f64;
    let mx = gaze_points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = gaze_points.iter().map(|p| p.y).sum::<f64>() / n;
    let avg = (x - mx).hypot(y - my);
    let min = gaze_points
        .iter()
        .map(|p| (x - p.x).hypot(y - p.y))
        .fold(f64::INFINITY, f64::min);
    Ok((avg, min))
}

/// Average precision with the all-points interpolated precision envelope.
/// Equal scores form a single threshold.
pub fn ap_inout(scores: &[InOutScore], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GazeError::shape("ap_inout labels", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(GazeError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].value().total_cmp(&scores[a].value()));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]].value();
        while k < order.len() && scores[order[k]].value() == s {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        points.push((tp as f64 / n_pos as f64, tp as f64 / seen as f64));
    }
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// Metrics for one annotated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub image_id: String,
    pub in_frame: bool,
    pub auc: Option<f64>,
    pub avg_l2: Option<f64>,
    pub min_l2: Option<f64>,
    pub inout_score: Option<f64>,
}

/// Aggregate plus the per-sample rows it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.result)? + "\n")?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.samples {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> GazeError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GazeError::Io(io),
        other => GazeError::InvalidConfig(format!("csv: {other:?}")),
    }
}

/// Per-sample metrics for one prediction.
pub fn sample_metrics(
    protocol: EvalProtocol,
    pred: &GazeHeatmap,
    gaze_points: &[GazePoint],
) -> Result<(f64, f64, f64)> {
    let (avg, min) = l2_metrics(pred, gaze_points)?;
    let auc = match protocol {
        EvalProtocol::Gazefollow => auc_gazefollow(pred, gaze_points)?,
        EvalProtocol::Tolerance { pixels } => {
            let n = gaze_points.len() as f64;
            let mean = GazePoint {
                x: gaze_points.iter().map(|p| p.x).sum::<f64>() / n,
                y: gaze_points.iter().map(|p| p.y).sum::<f64>() / n,
            };
            auc_tolerance(pred, &mean, pixels)?
        }
    };
    Ok((auc, avg, min))
}

/// Runs `model` over every annotation in `dataset`, one call per image.
///
/// Heatmap metrics average over in-frame samples; AP covers all samples when
/// the model emits in/out scores. Any per-sample failure fails the whole
/// evaluation with every failure listed.
pub fn evaluate_detailed(model: &mut dyn GazeModel, dataset: &Dataset, protocol: EvalProtocol) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    let mut samples = Vec::with_capacity(dataset.len());
    let mut failures = Vec::new();
    for (image_id, indices) in dataset.image_groups() {
        let preds = dataset.image(&image_id).and_then(|img| {
            let boxes: Vec<_> = indices.iter().map(|&i| dataset.annotations[i].bbox).collect();
            model.predict(&img, &boxes)
        });
        let preds = match preds {
            Ok(p) if p.len() == indices.len() => p,
            Ok(p) => {
                failures.push(format!("{image_id}: {} predictions for {} boxes", p.len(), indices.len()));
                continue;
            }
            Err(e) => {
                failures.push(format!("{image_id}: {e}"));
                continue;
            }
        };
        for (&i, pred) in indices.iter().zip(preds) {
            let ann = &dataset.annotations[i];
            let mut row = SampleMetrics {
                index: i,
                image_id: image_id.clone(),
                in_frame: ann.in_frame,
                auc: None,
                avg_l2: None,
                min_l2: None,
                inout_score: pred.inout.map(InOutScore::value),
            };
            if ann.in_frame {
                match sample_metrics(protocol, &pred.heatmap, &ann.gaze_points) {
                    Ok((auc, avg, min)) => {
                        row.auc = Some(auc);
                        row.avg_l2 = Some(avg);
                        row.min_l2 = Some(min);
                    }
                    Err(e) => failures.push(format!("{image_id} (sample {i}): {e}")),
                }
            }
            samples.push(row);
        }
    }
    if !failures.is_empty() {
        return Err(GazeError::Evaluation {
            total: dataset.len(),
            failures,
        });
    }
    let result = aggregate(&samples)?;
    samples.sort_by_key(|s| s.index);
    Ok(EvalReport { result, samples })
}

pub fn evaluate(model: &mut dyn GazeModel, dataset: &Dataset, protocol: EvalProtocol) -> Result<EvalResult> {
    Ok(evaluate_detailed(model, dataset, protocol)?.result)
}

/// Averages per-sample rows into an [`EvalResult`].
pub fn aggregate(samples: &[SampleMetrics]) -> Result<EvalResult> {
    let scored: Vec<&SampleMetrics> = samples.iter().filter(|s| s.auc.is_some()).collect();
    if scored.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    let n = scored.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> Option<f64>| scored.iter().filter_map(|s| f(s)).sum::<f64>() / n;
    let ap = if samples.iter().all(|s| s.inout_score.is_some()) {
        let scores = samples
            .iter()
            .map(|s| InOutScore::new(s.inout_score.unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = samples.iter().map(|s| s.in_frame).collect();
        Some(ap_inout(&scores, &labels)?)
    } else {
        None
    };
    Ok(EvalResult {
        auc: mean(|s| s.auc),
        avg_l2: mean(|s| s.avg_l2),
        min_l2: mean(|s| s.min_l2),
        ap_inout: ap,
        n_samples: samples.len(),
    })
}
