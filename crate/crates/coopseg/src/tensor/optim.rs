//! Parameters and momentum SGD.

use super::{Elem, Tensor, TensorError};

/// A trainable tensor with its persistent gradient buffer and momentum
/// state. The value enters each forward pass as a leaf copy; `backward`
/// gradients are accumulated back here by the owning network.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    tensor: Tensor,
    velocity: Vec<Elem>,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            velocity: vec![0.0; n],
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.tensor
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn grad(&self) -> Option<&[Elem]> {
        self.tensor.grad()
    }

    /// Adds `contrib` onto the persistent gradient buffer.
    pub fn accumulate_grad(&mut self, contrib: &[Elem]) {
        debug_assert_eq!(contrib.len(), self.tensor.numel());
        let g = self.tensor.grad_mut();
        for (gv, cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

/// One momentum-SGD update over a parameter set:
/// `v <- momentum * v + grad; p <- p - lr * v`. Gradients are left in
/// place; the caller zeroes them between steps.
pub fn sgd_step<'a, I>(params: I, lr: Elem, momentum: Elem) -> Result<(), TensorError>
where
    I: IntoIterator<Item = &'a mut Param>,
{
    for p in params {
        let grad = match p.tensor.grad() {
            Some(g) => g.to_vec(),
            None => {
                return Err(TensorError::MissingGrad {
                    name: p.name.clone(),
                })
            }
        };
        for ((v, g), value) in p
            .velocity
            .iter_mut()
            .zip(&grad)
            .zip(p.tensor.data_mut().iter_mut())
        {
            *v = momentum * *v + g;
            *value -= lr * *v;
        }
    }
    Ok(())
}

/// Zeroes the gradient buffers of a parameter set.
pub fn zero_grads<'a, I>(params: I)
where
    I: IntoIterator<Item = &'a mut Param>,
{
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: Elem) -> Param {
        Param::new("p", Tensor::new(vec![1], vec![value]).unwrap())
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = param(1.0);
        p.accumulate_grad(&[2.0]);
        sgd_step([&mut p], 0.1, 0.0).unwrap();
        assert!((p.value().data()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = param(1.5);
        p.accumulate_grad(&[0.0]);
        sgd_step([&mut p], 0.1, 0.9).unwrap();
        assert_eq!(p.value().data()[0], 1.5);
    }

    #[test]
    fn momentum_compounds_over_two_steps() {
        // Fixed grad g: step one moves by lr*g, step two by lr*1.9*g.
        let g = 2.0;
        let lr = 0.1;
        let mut p = param(1.0);
        p.accumulate_grad(&[g]);
        sgd_step([&mut p], lr, 0.9).unwrap();
        let after_one = p.value().data()[0];
        assert!((f64::from(1.0 - lr * g) - f64::from(after_one)).abs() < 1e-6);
        sgd_step([&mut p], lr, 0.9).unwrap();
        let after_two = p.value().data()[0];
        assert!((f64::from(after_one - lr * 1.9 * g) - f64::from(after_two)).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = param(1.0);
        let err = sgd_step([&mut p], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad { .. }));
    }
}
