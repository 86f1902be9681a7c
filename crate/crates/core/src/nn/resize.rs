use ndarray::{Array2, ArrayView2};

use crate::real::Real;

/// Bilinear resampling between two grid sizes (half-pixel centers, edge clamp).
///
/// Precomputes, for each output cell, the four source cells and their weights, so
/// the same table drives the forward map and its transpose.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl BilinearResize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let ys = axis_taps(in_hw.0, out_hw.0);
        let xs = axis_taps(in_hw.1, out_hw.1);
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let w = in_hw.1;
                taps.push([
                    (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                    (y0 * w + x1, (1.0 - ly) * lx),
                    (y1 * w + x0, ly * (1.0 - lx)),
                    (y1 * w + x1, ly * lx),
                ]);
            }
        }
        Self { in_hw, out_hw, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.in_hw == self.out_hw
    }

    /// Resamples a token matrix `(H_in·W_in, C) → (H_out·W_out, C)`.
    pub fn forward<T: Real>(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = Array2::zeros((self.taps.len(), x.ncols()));
        for (mut row, taps) in y.rows_mut().into_iter().zip(&self.taps) {
            for &(src, w) in taps {
                if w != 0.0 {
                    row.scaled_add(T::of(w), &x.row(src));
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, dy: ArrayView2<'_, T>) -> Array2<T> {
        let mut dx = Array2::zeros((self.in_hw.0 * self.in_hw.1, dy.ncols()));
        for (row, taps) in dy.rows().into_iter().zip(&self.taps) {
            for &(src, w) in taps {
                if w != 0.0 {
                    dx.row_mut(src).scaled_add(T::of(w), &row);
                }
            }
        }
        dx
    }

    /// Resamples a single-channel grid.
    pub fn resize_grid<T: Real>(&self, grid: ArrayView2<'_, T>) -> Array2<T> {
        let flat = grid.to_shape((grid.len(), 1)).expect("contiguous grid").to_owned();
        self.forward(flat.view())
            .into_shape_with_order(self.out_hw)
            .expect("resize output shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let r = BilinearResize::new((3, 4), (3, 4));
        let x = Array2::from_shape_fn((12, 2), |(i, c)| (i * 2 + c) as f64);
        assert_eq!(r.forward(x.view()), x);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let r = BilinearResize::new((4, 4), (9, 7));
        let x = Array2::from_elem((16, 1), 0.25f64);
        assert!(r.forward(x.view()).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn backward_is_transpose() {
        let r = BilinearResize::new((3, 5), (8, 6));
        let x = Array2::from_shape_fn((15, 1), |(i, _)| (i as f64 * 0.37).sin());
        let dy = Array2::from_shape_fn((48, 1), |(i, _)| (i as f64 * 0.11).cos());
        let lhs = (&r.forward(x.view()) * &dy).sum();
        let rhs = (&x * &r.backward(dy.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
