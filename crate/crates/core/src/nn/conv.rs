//! Convolutions on channel-last token grids (`rows = H·W` in row-major order).
//!
//! Only the kernel shapes the decoders need are provided: 1×1 convolutions are
//! plain [`Linear`](super::Linear) maps, and the stride-2 2×2 kernels tile the
//! grid without overlap, so both reduce to a matrix product plus a reshuffle.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Ix1, Ix2};
use rand::Rng;

use super::param::{join, trunc_normal, HasParams, Param};
use crate::real::Real;

/// Transposed convolution, kernel 2, stride 2: `(H·W, C_in) → (2H·2W, C_out)`.
///
/// The weight is stored as `(C_out·4, C_in)` with row `o·4 + a·2 + b` holding the
/// kernel tap at offset `(a, b)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T, Ix2>,
    pub bias: Param<T, Ix1>,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal((c_out * 4, c_in), 0.02, rng)),
            bias: Param::new(Array1::zeros(c_out)),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Param::new(Array2::zeros((c_out * 4, c_in))),
            bias: Param::new(Array1::zeros(c_out)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.value.len()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
        let c_out = self.out_channels();
        let z = x.dot(&self.weight.value.t());
        let w2 = 2 * width;
        let mut y = Array2::zeros((4 * height * width, c_out));
        for i in 0..height {
            for j in 0..width {
                let zrow = z.row(i * width + j);
                for a in 0..2 {
                    for b in 0..2 {
                        let mut yrow = y.row_mut((2 * i + a) * w2 + 2 * j + b);
                        for o in 0..c_out {
                            yrow[o] = zrow[o * 4 + a * 2 + b] + self.bias.value[o];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
        let c_out = self.out_channels();
        let w2 = 2 * width;
        let mut dz = Array2::zeros((height * width, c_out * 4));
        for i in 0..height {
            for j in 0..width {
                let mut zrow = dz.row_mut(i * width + j);
                for a in 0..2 {
                    for b in 0..2 {
                        let yrow = dy.row((2 * i + a) * w2 + 2 * j + b);
                        for o in 0..c_out {
                            zrow[o * 4 + a * 2 + b] = yrow[o];
                        }
                    }
                }
            }
        }
        self.bias.grad += &dy.sum_axis(Axis(0));
        ndarray::linalg::general_mat_mul(T::one(), &dz.t(), &x, T::one(), &mut self.weight.grad);
        dz.dot(&self.weight.value)
    }
}

impl<T: Real> HasParams<T> for ConvTranspose2x2<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.weight.visit(&join(prefix, "weight"), f);
        self.bias.visit(&join(prefix, "bias"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
    }
}

/// Gathers each non-overlapping 2×2 block into one row: `(H·W, C) → (H/2·W/2, 4C)`.
///
/// Column `(a·2 + b)·C + c` holds channel `c` of the pixel at offset `(a, b)`.
pub fn space_to_depth<T: Real>(x: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
    let c = x.ncols();
    let (h2, w2) = (height / 2, width / 2);
    let mut out = Array2::zeros((h2 * w2, 4 * c));
    for i in 0..h2 {
        for j in 0..w2 {
            let mut row = out.row_mut(i * w2 + j);
            for a in 0..2 {
                for b in 0..2 {
                    let src = x.row((2 * i + a) * width + 2 * j + b);
                    row.slice_mut(s![(a * 2 + b) * c..(a * 2 + b + 1) * c]).assign(&src);
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Real>(x: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
    let c = x.ncols() / 4;
    let (h2, w2) = (height / 2, width / 2);
    let mut out = Array2::zeros((height * width, c));
    for i in 0..h2 {
        for j in 0..w2 {
            let row = x.row(i * w2 + j);
            for a in 0..2 {
                for b in 0..2 {
                    out.row_mut((2 * i + a) * width + 2 * j + b)
                        .assign(&row.slice(s![(a * 2 + b) * c..(a * 2 + b + 1) * c]));
                }
            }
        }
    }
    out
}
