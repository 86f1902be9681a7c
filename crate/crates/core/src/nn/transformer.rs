use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::activation::{gelu, gelu_backward};
use super::attention::{AttentionCache, MultiHeadAttention};
use super::linear::Linear;
use super::norm::{LayerNorm, NormCache};
use super::param::{join, HasParams};
use crate::real::Real;

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = gelu(pre.view());
        let y = self.fc2.forward(act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        let dact = self.fc2.backward(cache.act.view(), dy);
        let dpre = gelu_backward(cache.pre.view(), dact.view());
        self.fc1.backward(cache.x.view(), dpre.view())
    }
}

impl<T: Real> HasParams<T> for Mlp<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.fc1.for_each_param(&join(prefix, "fc1"), f);
        self.fc2.for_each_param(&join(prefix, "fc2"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.fc1.for_each_param_mut(&join(prefix, "fc1"), f);
        self.fc2.for_each_param_mut(&join(prefix, "fc2"), f);
    }
}

/// Stochastic depth on one residual branch of one token list.
///
/// Returns the branch multiplier: `1` when disabled, otherwise `0` with
/// probability `p` and `1 / (1 - p)` with probability `1 - p`.
pub fn drop_path_scale<T: Real, R: Rng + ?Sized>(p: f64, rng: Option<&mut R>) -> T {
    match rng {
        Some(rng) if p > 0.0 => {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                T::of(1.0 / (1.0 - p))
            }
        }
        _ => T::one(),
    }
}

/// Pre-norm transformer encoder layer with drop-path on both residual branches.
#[derive(Debug, Clone)]
pub struct TransformerLayer<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub drop_path: f64,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    norm1: NormCache<T>,
    attn: AttentionCache<T>,
    scale1: T,
    norm2: NormCache<T>,
    mlp: MlpCache<T>,
    scale2: T,
}

impl<T: Real> TransformerLayer<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_dim: usize, drop_path: f64, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, mlp_dim, rng),
            drop_path,
        }
    }

    /// Passing `rng = None` is evaluation mode: drop-path is the identity.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, T>,
        allowed: Option<&Array2<bool>>,
        mut rng: Option<&mut R>,
    ) -> (Array2<T>, LayerCache<T>) {
        let scale1: T = drop_path_scale(self.drop_path, rng.as_deref_mut());
        let scale2: T = drop_path_scale(self.drop_path, rng);
        let (h, norm1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(h.view(), allowed);
        let x1 = &x + &(a * scale1);
        let (h2, norm2) = self.norm2.forward(x1.view());
        let (m, mlp) = self.mlp.forward(h2.view());
        let out = x1 + m * scale2;
        (
            out,
            LayerCache {
                norm1,
                attn,
                scale1,
                norm2,
                mlp,
                scale2,
            },
        )
    }

    pub fn backward(&mut self, cache: &LayerCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
        let mut dx1 = dy.to_owned();
        if cache.scale2 != T::zero() {
            let dm = &dy * cache.scale2;
            let dh2 = self.mlp.backward(&cache.mlp, dm.view());
            dx1 += &self.norm2.backward(&cache.norm2, dh2.view());
        }
        let mut dx = dx1.clone();
        if cache.scale1 != T::zero() {
            let da = &dx1 * cache.scale1;
            let dh = self.attn.backward(&cache.attn, da.view());
            dx += &self.norm1.backward(&cache.norm1, dh.view());
        }
        dx
    }
}

impl<T: Real> HasParams<T> for TransformerLayer<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.norm1.for_each_param(&join(prefix, "norm1"), f);
        self.attn.for_each_param(&join(prefix, "attn"), f);
        self.norm2.for_each_param(&join(prefix, "norm2"), f);
        self.mlp.for_each_param(&join(prefix, "mlp"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.norm1.for_each_param_mut(&join(prefix, "norm1"), f);
        self.attn.for_each_param_mut(&join(prefix, "attn"), f);
        self.norm2.for_each_param_mut(&join(prefix, "norm2"), f);
        self.mlp.for_each_param_mut(&join(prefix, "mlp"), f);
    }
}
