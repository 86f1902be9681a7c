//! Inference cost as a function of the number of people in one image.

use std::time::Instant;

use gazelle_core::data::RgbFrame;
use gazelle_core::pipeline::{GazeModel, GazePipeline};
use gazelle_core::prompting::HeadBBox;
use gazelle_core::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub persons: usize,
    /// Fastest of the repeats, in milliseconds.
    pub best_ms: f64,
    pub median_ms: f64,
    /// Encoder invocations per prediction call.
    pub backbone_calls: usize,
}

/// `n` small head boxes spread over a grid of the image.
pub fn spread_boxes(n: usize) -> Vec<HeadBBox> {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    let cell = 1.0 / side as f64;
    (0..n)
        .map(|k| {
            let (i, j) = (k / side, k % side);
            let (x, y) = (j as f64 * cell, i as f64 * cell);
            HeadBBox::new(x + 0.25 * cell, y + 0.25 * cell, x + 0.6 * cell, y + 0.6 * cell).expect("inside the unit square")
        })
        .collect()
}

/// Times full predictions (encoder plus one decode per person) for each
/// person count.
pub fn measure(pipeline: &mut GazePipeline, image: &RgbFrame, counts: &[usize], repeats: usize) -> Result<Vec<ScalingPoint>> {
    let repeats = repeats.max(1);
    pipeline.predict(image, &spread_boxes(1))?;
    counts
        .iter()
        .map(|&n| {
            let boxes = spread_boxes(n);
            let mut times = Vec::with_capacity(repeats);
            let mut calls = 0;
            for _ in 0..repeats {
                let before = pipeline.backbone.calls();
                let t = Instant::now();
                pipeline.predict(image, &boxes)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                calls = pipeline.backbone.calls() - before;
            }
            times.sort_by(f64::total_cmp);
            Ok(ScalingPoint {
                persons: n,
                best_ms: times[0],
                median_ms: times[times.len() / 2],
                backbone_calls: calls,
            })
        })
        .collect()
}
