use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use super::linear::Linear;
use super::param::{join, HasParams};
use crate::real::Real;

/// Multi-head scaled dot-product attention over a single token list.
///
/// An optional `allowed[q, k]` mask restricts which keys each query sees; every
/// query must be allowed at least one key.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub num_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    merged: Array2<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % num_heads, 0, "dim must be divisible by num_heads");
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            num_heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>, allowed: Option<&Array2<bool>>) -> (Array2<T>, AttentionCache<T>) {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut merged = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            if let Some(mask) = allowed {
                Zip::from(&mut scores).and(mask).for_each(|s, &ok| {
                    if !ok {
                        *s = T::neg_infinity();
                    }
                });
            }
            softmax_rows(&mut scores);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            probs.push(scores);
        }
        let y = self.proj.forward(merged.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dmerged = self.proj.backward(cache.merged.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let mut ds = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward: p * (dp - <dp, p>)
            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot = row.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut row).and(&prow).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        self.qkv.backward(cache.x.view(), dqkv.view())
    }
}

pub(crate) fn softmax_rows<T: Real>(scores: &mut Array2<T>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Real> HasParams<T> for MultiHeadAttention<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.qkv.for_each_param(&join(prefix, "qkv"), f);
        self.proj.for_each_param(&join(prefix, "proj"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.qkv.for_each_param_mut(&join(prefix, "qkv"), f);
        self.proj.for_each_param_mut(&join(prefix, "proj"), f);
    }
}
