//! Central finite-difference checks against accumulated parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::Module;

/// Relative error with an absolute floor for values that are numerically zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Central-difference step sizes. Round-off spoils the smallest on tiny
/// gradients and a nearby relu kink spoils the largest, so each coordinate is
/// scored by its best agreement over all three; a wrong gradient disagrees at
/// every step.
pub const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Best relative error of `analytic` against central differences of `at`, a
/// function of the coordinate's value.
fn coordinate_error(analytic: f64, x: f64, at: &mut dyn FnMut(f64) -> f64) -> f64 {
    let err = FD_STEPS
        .iter()
        .map(|&h| relative_error(analytic, (at(x + h) - at(x - h)) / (2.0 * h)))
        .fold(f64::INFINITY, f64::min);
    at(x);
    err
}

fn set_value<M: Module<f64> + ?Sized>(model: &mut M, param: usize, index: usize, value: f64) {
    let mut p = 0;
    model.visit_mut(&mut |prm| {
        if p == param {
            prm.value[index] = value;
        }
        p += 1;
    });
}

/// Worst relative error between the gradients already stored in `model` and
/// central differences of `loss`, over `per_param` random entries of each parameter.
pub fn max_param_grad_error<M: Module<f64> + ?Sized>(
    model: &mut M,
    loss: &dyn Fn(&M) -> f64,
    per_param: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    let mut p = 0;
    model.visit(&mut |prm| {
        for _ in 0..per_param.min(prm.len()) {
            let i = rng.random_range(0..prm.len());
            picks.push((p, i, prm.grad[i], prm.value[i]));
        }
        p += 1;
    });
    let mut worst = 0.0f64;
    for (p, i, analytic, value) in picks {
        let err = coordinate_error(analytic, value, &mut |v| {
            set_value(model, p, i, v);
            loss(model)
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error of `grad` against central differences of `f` at `x`,
/// over `count` random coordinates.
pub fn max_input_grad_error(x: &[f64], grad: &[f64], f: &dyn Fn(&[f64]) -> f64, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..count.min(x.len()) {
        let i = rng.random_range(0..x.len());
        let err = coordinate_error(grad[i], x[i], &mut |v| {
            buf[i] = v;
            f(&buf)
        });
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Cubic(Param<f64>);

    impl Module<f64> for Cubic {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0);
        }

        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    fn cubic(scale: f64) -> Cubic {
        let values = vec![0.3, -1.2, 0.7, 2.0];
        let mut p = Param::new("c", vec![4], values.clone());
        p.grad = values.iter().map(|v| 3.0 * v * v * scale).collect();
        Cubic(p)
    }

    fn loss(m: &Cubic) -> f64 {
        m.0.value.iter().map(|v| v * v * v).sum()
    }

    #[test]
    fn exact_gradient_passes_and_values_are_restored() {
        let mut m = cubic(1.0);
        assert!(max_param_grad_error(&mut m, &loss, 4, 0) < 1e-8);
        assert_eq!(m.0.value, vec![0.3, -1.2, 0.7, 2.0]);
    }

    #[test]
    fn slightly_wrong_gradient_is_flagged() {
        let mut m = cubic(1.001);
        assert!(max_param_grad_error(&mut m, &loss, 4, 0) > 5e-4);
        let x = [0.5, -0.25];
        let f = |x: &[f64]| x[0].sin() + x[1] * x[1];
        let off = [0.5f64.cos() * 1.001, -0.5 * 1.001];
        assert!(max_input_grad_error(&x, &off, &f, 2, 0) > 5e-4);
    }

    #[test]
    fn kink_near_the_point_is_tolerated() {
        let x = [3e-6, -4e-6];
        let f = |x: &[f64]| x.iter().map(|v| v.max(0.0) * 2.0).sum::<f64>();
        assert!(max_input_grad_error(&x, &[2.0, 0.0], &f, 2, 1) < 1e-12);
    }
}
