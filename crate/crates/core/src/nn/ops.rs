use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::real::Real;

pub fn relu_inplace<T: Real, D: ndarray::Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `grad` where the relu output was not positive.
pub fn relu_backward_inplace<T: Real, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<T, D>,
    output: &ndarray::Array<T, D>,
) {
    Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= T::zero() {
            *g = T::zero();
        }
    });
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const NORM_EPS: f64 = 1e-12;

/// Row-wise `x / sqrt(|x|^2 + eps)`. Returns the normalized rows and their norms.
pub fn l2_normalize_rows<T: Real>(x: ArrayView2<'_, T>) -> (Array2<T>, Vec<T>) {
    let eps = T::lit(NORM_EPS);
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through [`l2_normalize_rows`]: `dx = (du - u (u . du)) / n`.
pub fn l2_normalize_rows_backward<T: Real>(
    normalized: ArrayView2<'_, T>,
    norms: &[T],
    grad_out: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut dx = grad_out.to_owned();
    for ((mut d, u), &n) in dx
        .axis_iter_mut(Axis(0))
        .zip(normalized.axis_iter(Axis(0)))
        .zip(norms)
    {
        let dot = d.iter().zip(u.iter()).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut d).and(&u).for_each(|g, &uv| *g = (*g - uv * dot) / n);
    }
    dx
}
