use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{GazeError, Result};
use crate::real::Real;

/// Fixed 2D sinusoidal position embedding, one `d_model` vector per grid cell.
///
/// The first half of the channels encodes the row, the second half the column;
/// each half is `[sin(pos·ω_k)…, cos(pos·ω_k)…]` with `ω_k = 10000^(-k / (d/4))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding<T> {
    table: Array2<T>,
    height: usize,
    width: usize,
}

impl<T: Real> PositionalEmbedding<T> {
    pub fn sinusoidal(d_model: usize, height: usize, width: usize) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(4) {
            return Err(GazeError::InvalidConfig(format!(
                "sinusoidal embedding needs d_model divisible by 4, got {d_model}"
            )));
        }
        let quarter = d_model / 4;
        let omega: Vec<f64> = (0..quarter)
            .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
            .collect();
        let table = Array2::from_shape_fn((height * width, d_model), |(cell, c)| {
            let (i, j) = (cell / width, cell % width);
            let (pos, c) = if c < 2 * quarter { (i, c) } else { (j, c - 2 * quarter) };
            let v = if c < quarter {
                (pos as f64 * omega[c]).sin()
            } else {
                (pos as f64 * omega[c - quarter]).cos()
            };
            T::of(v)
        });
        Ok(Self { table, height, width })
    }

    pub fn d_model(&self) -> usize {
        self.table.ncols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(H·W, d_model)` in row-major cell order.
    pub fn table(&self) -> ArrayView2<'_, T> {
        self.table.view()
    }

    pub fn at(&self, i: usize, j: usize) -> ArrayView1<'_, T> {
        self.table.row(i * self.width + j)
    }

    pub fn at_owned(&self, i: usize, j: usize) -> Array1<T> {
        self.at(i, j).to_owned()
    }
}

pub fn sinusoidal_embedding<T: Real>(d_model: usize, height: usize, width: usize) -> Result<PositionalEmbedding<T>> {
    PositionalEmbedding::sinusoidal(d_model, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = sinusoidal_embedding::<f64>(64, 12, 9).unwrap();
        let b = sinusoidal_embedding::<f64>(64, 12, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.table().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn cells_are_pairwise_distinct_on_8x8() {
        let p = sinusoidal_embedding::<f64>(16, 8, 8).unwrap();
        for a in 0..64 {
            for b in (a + 1)..64 {
                let diff: f64 = p
                    .table()
                    .row(a)
                    .iter()
                    .zip(p.table().row(b).iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 1e-6, "cells {a} and {b} collide");
            }
        }
    }

    #[test]
    fn unique_up_to_64x64() {
        let p = sinusoidal_embedding::<f64>(256, 64, 64).unwrap();
        let mut keys: Vec<Vec<i64>> = (0..64 * 64)
            .map(|k| p.table().row(k).iter().map(|v| (v * 1e9).round() as i64).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 64 * 64);
    }

    #[test]
    fn rejects_bad_dimension() {
        assert!(sinusoidal_embedding::<f32>(6, 4, 4).is_err());
    }

    #[test]
    fn origin_cell_is_sin_zero_cos_one() {
        let p = sinusoidal_embedding::<f64>(8, 3, 3).unwrap();
        assert_eq!(p.at(0, 0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
