//! The gaze decoder: positional embeddings, token assembly, transformer stack
//! and prediction heads.

pub mod config;
pub mod embedding;
pub mod heads;
pub mod model;
pub mod tokens;

use ndarray::Array2;

use crate::error::{GazeError, Result};

pub use config::{count_parameters, DecoderConfig, DecoderHead, TokenAttention, INOUT_HIDDEN};
pub use embedding::{sinusoidal_embedding, PositionalEmbedding};
pub use heads::{heatmap_head_conv2, heatmap_head_dot, heatmap_head_mlp, inout_head, ConvHead, InOutHead, MlpHead};
pub use model::{copy_params, decoder_forward, GazeLle, HeatmapHead, PersonCache, PersonOutput, SceneContext};
pub use tokens::{assemble_tokens, TokenLayout, TokenList};

/// Predicted gaze heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeHeatmap {
    data: Array2<f64>,
}

impl GazeHeatmap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GazeError::OutOfRange(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Row and column of the maximum; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.data.ncols();
        let mut best = (0, f64::NEG_INFINITY);
        for (k, &v) in self.data.iter().enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        (best.0 / w, best.0 % w)
    }

    /// Normalized `(x, y)` of the maximum's pixel center.
    pub fn argmax_point(&self) -> (f64, f64) {
        let (i, j) = self.argmax();
        let (h, w) = self.shape();
        ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
    }
}

/// Probability that the gaze target lies inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct InOutScore(f64);

impl InOutScore {
    pub fn new(y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&y) {
            return Err(GazeError::OutOfRange(format!("in/out score {y} outside [0, 1]")));
        }
        Ok(Self(y))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}
