use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Ix1, Ix2};
use rand::Rng;

use super::param::{join, trunc_normal, HasParams, Param};
use crate::real::Real;

/// Affine map applied row-wise: `y = x Wᵀ + b`, with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T, Ix2>,
    pub bias: Param<T, Ix1>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal((output, input), 0.02, rng)),
            bias: Param::new(Array1::zeros(output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(Array2::zeros((output, input))),
            bias: Param::new(Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value)
    }

    /// Accumulates parameter gradients only.
    pub fn accumulate(&mut self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) {
        general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
    }
}

impl<T: Real> HasParams<T> for Linear<T> {
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
