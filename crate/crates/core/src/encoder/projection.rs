use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::tokens::TokenStore;
use crate::cost::MacCounter;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, l2_normalize_rows_backward, Module, Param};
use crate::real::Real;

/// Bias-free linear map `C -> M` followed by per-row L2 normalization.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub weight: Param<T>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug)]
pub struct ProjectionTape<T> {
    input: Array2<T>,
    normalized: Array2<T>,
    norms: Vec<T>,
}

impl<T: Real> Projection<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weight: Param::new(format!("{name}.weight"), vec![out_dim, in_dim], w),
            in_dim,
            out_dim,
        }
    }

    /// Square identity map (requires `in_dim == out_dim`).
    pub fn identity(name: &str, dim: usize) -> Self {
        let mut w = vec![T::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = T::one();
        }
        Self {
            weight: Param::new(format!("{name}.weight"), vec![dim, dim], w),
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weight.value).expect("layout")
    }

    /// Projects rows `K x C` to unit rows `K x M`; counts `K*C*M` MACs.
    pub fn forward(&self, x: ArrayView2<'_, T>, macs: Option<&MacCounter>) -> Result<(Array2<T>, ProjectionTape<T>)> {
        if x.ncols() != self.in_dim {
            return Err(Error::DimensionMismatch {
                what: "projection input",
                expected: self.in_dim,
                found: x.ncols(),
            });
        }
        let mut z = Array2::<T>::zeros((x.nrows(), self.out_dim));
        general_mat_mul(T::one(), &x, &self.matrix().t(), T::zero(), &mut z);
        if let Some(m) = macs {
            m.add((x.nrows() * self.in_dim * self.out_dim) as u64);
        }
        let (normalized, norms) = l2_normalize_rows(z.view());
        Ok((
            normalized.clone(),
            ProjectionTape {
                input: x.to_owned(),
                normalized,
                norms,
            },
        ))
    }

    /// Accumulates the weight gradient and returns `d input`.
    pub fn backward(&mut self, tape: &ProjectionTape<T>, grad_out: ArrayView2<'_, T>) -> Array2<T> {
        let dz = l2_normalize_rows_backward(tape.normalized.view(), &tape.norms, grad_out);
        {
            let mut gw = ndarray::ArrayViewMut2::from_shape((self.out_dim, self.in_dim), &mut self.weight.grad)
                .expect("layout");
            general_mat_mul(T::one(), &dz.t(), &tape.input, T::one(), &mut gw);
        }
        let mut dx = Array2::<T>::zeros((dz.nrows(), self.in_dim));
        general_mat_mul(T::one(), &dz, &self.matrix(), T::zero(), &mut dx);
        dx
    }

    /// Projects every voxel of a store.
    pub fn project(&self, ts: &TokenStore<T>, macs: Option<&MacCounter>) -> Result<TokenStore<T>> {
        if ts.dim() != self.in_dim {
            return Err(Error::DimensionMismatch {
                what: "token store dimension",
                expected: self.in_dim,
                found: ts.dim(),
            });
        }
        let rows = ts.to_rows();
        let (out, _) = self.forward(rows.view(), macs)?;
        TokenStore::from_channel_major(ts.shape(), out.t().as_standard_layout().into_owned())
    }
}

impl<T: Real> Module<T> for Projection<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projection::<f32>::new("p", 8, 4, &mut rng);
        let map = Array4::from_shape_fn((8, 2, 2, 2), |(c, d, h, w)| ((c * 7 + d * 3 + h * 5 + w) % 9) as f32 - 4.0);
        let out = p.project(&TokenStore::from_feature_map(map), None).unwrap();
        assert_eq!(out.dim(), 4);
        for row in out.to_rows().rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_leaves_unit_token_unchanged() {
        let p = Projection::<f64>::identity("p", 3);
        let x = ndarray::arr2(&[[0.6, 0.0, 0.8]]);
        let (y, _) = p.forward(x.view(), None).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = Projection::<f64>::identity("p", 3);
        let x = Array2::<f64>::zeros((2, 4));
        assert!(matches!(p.forward(x.view(), None), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn counts_k_c_m_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projection::<f32>::new("p", 8, 4, &mut rng);
        let counter = MacCounter::default();
        let map = Array4::<f32>::ones((8, 4, 4, 4));
        p.project(&TokenStore::from_feature_map(map), Some(&counter)).unwrap();
        assert_eq!(counter.get(), 4 * 4 * 4 * 8 * 4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Projection::<f64>::new("p", 5, 3, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 1.0);
        let r = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.7 + 0.1);
        let loss = |p: &Projection<f64>, x: &Array2<f64>| (&p.forward(x.view(), None).unwrap().0 * &r).sum();
        let (_, tape) = p.forward(x.view(), None).unwrap();
        let dx = p.backward(&tape, r.view());
        let h = 1e-6;
        for i in 0..p.weight.len() {
            let mut q = p.clone();
            q.weight.value[i] += h;
            let a = loss(&q, &x);
            q.weight.value[i] -= 2.0 * h;
            let b = loss(&q, &x);
            let fd = (a - b) / (2.0 * h);
            assert!((fd - p.weight.grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
        for idx in [(0, 0), (2, 3), (3, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let a = loss(&p, &xp);
            xp[idx] -= 2.0 * h;
            let b = loss(&p, &xp);
            let fd = (a - b) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
