//! Head prompts: the binary head mask with its added embedding, and the
//! alternative head-position token.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backbone::SceneFeatureMap;
use crate::decoder::PositionalEmbedding;
use crate::error::{GazeError, Result};
use crate::real::Real;

/// Head bounding box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl HeadBBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    /// Converts a pixel-space box to normalized coordinates.
    pub fn from_pixels(xmin: f64, ymin: f64, xmax: f64, ymax: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(xmin / width, ymin / height, xmax / width, ymax / height)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(in_unit(self.xmin) && in_unit(self.ymin) && in_unit(self.xmax) && in_unit(self.ymax)) {
            return Err(GazeError::InvalidBBox(format!("{self:?} has coordinates outside [0, 1]")));
        }
        if self.xmin > self.xmax || self.ymin > self.ymax {
            return Err(GazeError::InvalidBBox(format!("{self:?} has min > max")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    /// Grid cell `(row, col)` containing the box center.
    pub fn center_cell(&self, height: usize, width: usize) -> (usize, usize) {
        let (cx, cy) = self.center();
        (cell_index(cy, height), cell_index(cx, width))
    }
}

/// Index of the cell containing normalized coordinate `v` on an `n`-cell axis.
pub(crate) fn cell_index(v: f64, n: usize) -> usize {
    ((v * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Downsampled binary head mask at token resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMask {
    pub data: Array2<u8>,
}

impl HeadMask {
    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Row-major indices of set cells.
    pub fn set_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| (v == 1).then_some(k))
            .collect()
    }
}

/// Marks every cell whose extent overlaps the box with positive area.
///
/// A zero-area box overlaps nothing; it marks the single cell containing its
/// center so the prompt is never empty.
pub fn build_head_mask(bbox: &HeadBBox, height: usize, width: usize) -> Result<HeadMask> {
    bbox.validate()?;
    if height == 0 || width == 0 {
        return Err(GazeError::shape("head mask grid", ">= 1x1", format!("{height}x{width}")));
    }
    let overlaps = |lo: f64, hi: f64, k: usize, n: usize| lo * (n as f64) < (k + 1) as f64 && hi * (n as f64) > k as f64;
    let mut data = Array2::from_shape_fn((height, width), |(i, j)| {
        u8::from(overlaps(bbox.ymin, bbox.ymax, i, height) && overlaps(bbox.xmin, bbox.xmax, j, width))
    });
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 || !data.iter().any(|&v| v == 1) {
        data.fill(0);
        let (i, j) = bbox.center_cell(height, width);
        data[[i, j]] = 1;
    }
    Ok(HeadMask { data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// `p_head` added to the scene tokens under the head mask.
    #[default]
    AddedEmbedding,
    /// An extra token built from the position embedding at the head center.
    PositionToken,
    /// No head conditioning (ablation only).
    None,
}

/// Learned head-prompt vector and which prompting scheme it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPromptParams<T> {
    pub p_head: Array1<T>,
    pub variant: PromptVariant,
}

/// `S = x_F + M * p_head`: adds `p_head` to every token whose mask cell is set.
pub fn apply_head_prompt<T: Real>(
    x_f: &SceneFeatureMap<T>,
    mask: &HeadMask,
    params: &HeadPromptParams<T>,
) -> Result<SceneFeatureMap<T>> {
    if params.variant != PromptVariant::AddedEmbedding {
        return Err(GazeError::VariantMismatch(format!(
            "added-embedding prompt requested with variant {:?}",
            params.variant
        )));
    }
    if (mask.height(), mask.width()) != (x_f.height(), x_f.width()) {
        return Err(GazeError::shape(
            "head mask",
            format!("{}x{}", x_f.height(), x_f.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    if params.p_head.len() != x_f.channels() {
        return Err(GazeError::shape("p_head", x_f.channels(), params.p_head.len()));
    }
    let mut tokens = x_f.tokens().to_owned();
    add_prompt_rows(&mut tokens, mask, params.p_head.view());
    SceneFeatureMap::new(tokens, x_f.height(), x_f.width())
}

pub(crate) fn add_prompt_rows<T: Real>(tokens: &mut Array2<T>, mask: &HeadMask, p_head: ArrayView1<'_, T>) {
    for k in mask.set_indices() {
        let mut row = tokens.row_mut(k);
        row += &p_head;
    }
}

/// Head-position token: the positional embedding at the head-center cell plus a
/// learned vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionToken<T> {
    pub t_pos: Array1<T>,
    /// Grid cell the embedding was sampled at.
    pub cell: (usize, usize),
}

pub fn build_position_token<T: Real>(
    bbox: &HeadBBox,
    pos: &PositionalEmbedding<T>,
    e_head: ArrayView1<'_, T>,
) -> Result<PositionToken<T>> {
    bbox.validate()?;
    if e_head.len() != pos.d_model() {
        return Err(GazeError::shape("e_head", pos.d_model(), e_head.len()));
    }
    let cell = bbox.center_cell(pos.height(), pos.width());
    let t_pos = &pos.at(cell.0, cell.1) + &e_head;
    Ok(PositionToken { t_pos, cell })
}
