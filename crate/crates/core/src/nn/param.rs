use crate::real::Real;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything holding parameters. Visit order is fixed and defines checkpoint and
/// optimizer layouts.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

pub fn zero_grads<T: Real, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit_mut(&mut |p| p.zero_grad());
}

/// Snapshot of `(name, shape, values)` in visit order.
pub fn collect_params<T: Real, M: Module<T> + ?Sized>(m: &M) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    m.visit(&mut |p| out.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    out
}
