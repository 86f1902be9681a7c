use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Ix1, Zip};

use super::param::{join, HasParams, Param};
use crate::real::Real;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Layer normalization over the channel axis of a token matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T, Ix1>,
    pub beta: Param<T, Ix1>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self::with_eps(dim, LN_EPS)
    }

    pub fn with_eps(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::new(Array1::zeros(dim)),
            eps,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, NormCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * s);
            *inv = s;
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        self.gamma.grad += &(&dy * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let d = T::of(dy.ncols() as f64);
        let mut dx = &dy * &self.gamma.value;
        for ((mut row, xh), &inv) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &h)| g * h).sum::<T>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &h| {
                *g = inv * (*g - mean_g - h * mean_gx);
            });
        }
        dx
    }
}

impl<T: Real> HasParams<T> for LayerNorm<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.gamma.visit(&join(prefix, "weight"), f);
        self.beta.visit(&join(prefix, "bias"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.gamma.visit_mut(&join(prefix, "weight"), f);
        self.beta.visit_mut(&join(prefix, "bias"), f);
    }
}

/// Batch normalization over the rows (spatial positions) of a token matrix.
///
/// Training mode normalizes with the statistics of the rows it is given and
/// updates the running estimates; evaluation uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T, Ix1>,
    pub beta: Param<T, Ix1>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, T>) -> (Array2<T>, NormCache<T>) {
        let n = T::of(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| T::one() / (v + T::of(BN_EPS)).sqrt());
        let xhat = &centered * &inv_std;
        let m = T::of(BN_MOMENTUM);
        self.running_mean = &self.running_mean * (T::one() - m) + &mean * m;
        self.running_var = &self.running_var * (T::one() - m) + &var * m;
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, NormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let inv_std = self.running_var.mapv(|v| T::one() / (v + T::of(BN_EPS)).sqrt());
        (&x - &self.running_mean) * &inv_std * &self.gamma.value + &self.beta.value
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        self.gamma.grad += &(&dy * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let n = T::of(dy.nrows() as f64);
        let g = &dy * &self.gamma.value;
        let mean_g = g.sum_axis(Axis(0)) / n;
        let mean_gx = (&g * &cache.xhat).sum_axis(Axis(0)) / n;
        (&g - &mean_g - &cache.xhat * &mean_gx) * &cache.inv_std
    }
}

impl<T: Real> HasParams<T> for BatchNorm<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.gamma.visit(&join(prefix, "weight"), f);
        self.beta.visit(&join(prefix, "bias"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.gamma.visit_mut(&join(prefix, "weight"), f);
        self.beta.visit_mut(&join(prefix, "bias"), f);
    }
}
