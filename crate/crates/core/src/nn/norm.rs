//! Per-channel instance normalization over the spatial axes, with affine scale and shift.

use ndarray::{Array1, Array4, Axis, Zip};

use super::param::{Module, Param};
use crate::real::Real;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug)]
pub struct NormTape<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Real> InstanceNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, NormTape<T>) {
        let c = x.dim().0;
        let n = T::lit((x.len() / c.max(1)) as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut y = Array4::zeros(x.raw_dim());
        for (ch, (mut xc, mut yc)) in xhat.axis_iter_mut(Axis(0)).zip(y.axis_iter_mut(Axis(0))).enumerate() {
            let mean = xc.sum() / n;
            let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(EPS)).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            Zip::from(&mut xc).and(&mut yc).for_each(|xv, yv| {
                *xv = (*xv - mean) * is;
                *yv = g * *xv + b;
            });
        }
        (y, NormTape { xhat, inv_std })
    }

    pub fn backward(&mut self, tape: &NormTape<T>, dy: &Array4<T>) -> Array4<T> {
        let c = dy.dim().0;
        let n = T::lit((dy.len() / c.max(1)) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(0), ch);
            let xh = tape.xhat.index_axis(Axis(0), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(T::zero(), |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * tape.inv_std[ch] / n;
            Zip::from(dx.index_axis_mut(Axis(0), ch))
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &g, &h| *d = k * (n * g - sum_dy - h * sum_dy_xh));
        }
        dx
    }
}

impl<T: Real> Module<T> for InstanceNorm3d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_input_grad_error, max_param_grad_error};
    use crate::nn::zero_grads;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_simple_fn((3, 4, 3, 5), || rng.random_range(-2.0..5.0f64));
        let (y, _) = InstanceNorm3d::new("n", 3).forward(&x);
        for yc in y.axis_iter(Axis(0)) {
            let m = yc.mean().unwrap();
            let v = yc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / yc.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_simple_fn((2, 3, 3, 2), || rng.random_range(-1.0..1.0f64));
        let r = Array4::from_shape_simple_fn((2, 3, 3, 2), || rng.random_range(-1.0..1.0f64));
        let mut norm = InstanceNorm3d::new("n", 2);
        norm.gamma.value = vec![1.3, -0.4];
        norm.beta.value = vec![0.2, 0.1];
        zero_grads(&mut norm);
        let (_, tape) = norm.forward(&x);
        let dx = norm.backward(&tape, &r);
        let loss = |m: &InstanceNorm3d<f64>, x: &Array4<f64>| (&m.forward(x).0 * &r).sum();
        assert!(max_param_grad_error(&mut norm, &|m| loss(m, &x), 2, 0) <= 1e-6);
        let flat: Vec<f64> = x.iter().copied().collect();
        let g: Vec<f64> = dx.iter().copied().collect();
        let f = |v: &[f64]| loss(&norm, &Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap());
        assert!(max_input_grad_error(&flat, &g, &f, 36, 1) <= 1e-6);
    }
}
