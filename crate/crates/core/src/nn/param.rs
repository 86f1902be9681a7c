use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// A learnable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T, D: Dimension> {
    pub value: Array<T, D>,
    pub grad: Array<T, D>,
}

impl<T: Real, D: Dimension> Param<T, D> {
    pub fn new(value: Array<T, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        f(name, self.value.view().into_dyn(), self.grad.view().into_dyn());
    }

    pub fn visit_mut(
        &mut self,
        name: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        f(name, self.value.view_mut().into_dyn(), self.grad.view_mut().into_dyn());
    }
}

/// Named traversal over learnable parameters.
///
/// Names are dot-separated paths (`transformer.layers.0.attn.qkv.weight`), stable
/// across runs; checkpoints and parameter groups key on them.
pub trait HasParams<T: Real> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>));

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    );

    fn zero_grad(&mut self) {
        self.for_each_param_mut("", &mut |_, _, mut g| g.fill(T::zero()));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, v, _| n += v.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param("", &mut |name, _, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<T: Real, D: Dimension, Sh, R: Rng + ?Sized>(shape: Sh, std: f64, rng: &mut R) -> Array<T, D>
where
    Sh: ndarray::ShapeBuilder<Dim = D>,
{
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    Array::from_shape_simple_fn(shape, || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break T::of(x);
        }
    })
}
