use serde::{Deserialize, Serialize};

use super::param::{Module, Param};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new<M: Module<T> + ?Sized>(config: AdamConfig, model: &M) -> Self {
        let mut first = Vec::new();
        model.visit(&mut |p: &Param<T>| first.push(vec![T::zero(); p.len()]));
        let second = first.clone();
        Self {
            config,
            state: AdamState {
                step: 0,
                first,
                second,
            },
        }
    }

    /// Applies one bias-corrected update from the accumulated gradients.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let mut idx = 0;
        let (firsts, seconds) = (&mut self.state.first, &mut self.state.second);
        model.visit_mut(&mut |p: &mut Param<T>| {
            let (m, v) = (&mut firsts[idx], &mut seconds[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = One(Param::new("p", vec![2], vec![1.0, -1.0]));
        m.0.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(AdamConfig::default(), &m);
        opt.step(&mut m);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((m.0.value[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((m.0.value[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut m = One(Param::new("p", vec![1], vec![3.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &m);
        for _ in 0..2000 {
            m.0.grad = vec![2.0 * (m.0.value[0] - 1.0)];
            opt.step(&mut m);
        }
        assert!((m.0.value[0] - 1.0).abs() < 1e-3);
    }
}
