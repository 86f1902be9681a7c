use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::real::Real;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu<T: Real, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(|v| {
        let v = v.to_f64();
        T::of(0.5 * v * (1.0 + libm::erf(v / SQRT_2)))
    })
}

pub fn gelu_backward<T: Real, D: Dimension>(x: ArrayView<'_, T, D>, dy: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&x).for_each(|g, &v| {
        let v = v.to_f64();
        let cdf = 0.5 * (1.0 + libm::erf(v / SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *g *= T::of(cdf + v * pdf);
    });
    dx
}

pub fn relu<T: Real, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real, D: Dimension>(x: ArrayView<'_, T, D>, dy: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&x).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    dx
}

#[inline]
pub fn sigmoid_scalar<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(sigmoid_scalar)
}

/// Gradient through a sigmoid given its output `p` and upstream gradient.
pub fn sigmoid_backward<T: Real, D: Dimension>(p: ArrayView<'_, T, D>, dy: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&p).for_each(|g, &p| *g *= p * (T::one() - p));
    dx
}
