//! Trilinear upsampling by integer factors (half-pixel centers, edge clamped).

use ndarray::{Array4, Axis};

use crate::real::Real;

/// Source taps for each output index along one axis: `(i0, i1, t)`.
fn taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_axis<T: Real>(x: &Array4<T>, axis: usize, factor: usize) -> Array4<T> {
    if factor == 1 {
        return x.clone();
    }
    let n = x.len_of(Axis(axis));
    let mut shape = x.raw_dim();
    shape[axis] = n * factor;
    let mut out = Array4::<T>::zeros(shape);
    let tap = taps(n, factor);
    for (lin, mut lout) in x.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        for (o, &(i0, i1, t)) in tap.iter().enumerate() {
            let t = T::lit(t);
            lout[o] = lin[i0] * (T::one() - t) + lin[i1] * t;
        }
    }
    out
}

fn upsample_axis_backward<T: Real>(dy: &Array4<T>, axis: usize, factor: usize) -> Array4<T> {
    if factor == 1 {
        return dy.clone();
    }
    let n = dy.len_of(Axis(axis)) / factor;
    let mut shape = dy.raw_dim();
    shape[axis] = n;
    let mut dx = Array4::<T>::zeros(shape);
    let tap = taps(n, factor);
    for (lout, mut lin) in dy.lanes(Axis(axis)).into_iter().zip(dx.lanes_mut(Axis(axis))) {
        for (o, &(i0, i1, t)) in tap.iter().enumerate() {
            let t = T::lit(t);
            let g = lout[o];
            lin[i0] += g * (T::one() - t);
            lin[i1] += g * t;
        }
    }
    dx
}

/// Upsamples the three spatial axes of a `(C, D, H, W)` map by `factor`.
pub fn upsample_trilinear<T: Real>(x: &Array4<T>, factor: usize) -> Array4<T> {
    let a = upsample_axis(x, 1, factor);
    let b = upsample_axis(&a, 2, factor);
    upsample_axis(&b, 3, factor)
}

pub fn upsample_trilinear_backward<T: Real>(dy: &Array4<T>, factor: usize) -> Array4<T> {
    let a = upsample_axis_backward(dy, 3, factor);
    let b = upsample_axis_backward(&a, 2, factor);
    upsample_axis_backward(&b, 1, factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_stays_constant() {
        let x = Array4::<f64>::from_elem((2, 2, 3, 2), 1.5);
        let y = upsample_trilinear(&x, 4);
        assert_eq!(y.shape(), &[2, 8, 12, 8]);
        assert!(y.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let x = Array4::from_shape_fn((1, 2, 3, 2), |(c, d, h, w)| (c + 2 * d + 3 * h + 5 * w) as f64 * 0.1 - 0.4);
        let dy = Array4::from_shape_fn((1, 4, 6, 4), |(_, d, h, w)| ((d * 7 + h * 3 + w) % 5) as f64 - 2.0);
        let y = upsample_trilinear(&x, 2);
        let dx = upsample_trilinear_backward(&dy, 2);
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
