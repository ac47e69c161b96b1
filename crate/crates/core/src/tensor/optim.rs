use super::{Scalar, Tensor};
use crate::error::{invalid_input, invalid_state, Result};

/// A named, optionally trainable tensor with its momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    velocity: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let velocity = Tensor::zeros(tensor.shape());
        Self {
            name: name.into(),
            tensor,
            trainable: true,
            velocity,
            grad: None,
        }
    }

    /// Layer part of the name: `conv1_1.weight` → `conv1_1`.
    pub fn layer(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }

    pub fn velocity(&self) -> &Tensor<T> {
        &self.velocity
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.tensor.shape() {
            return Err(invalid_input(format!(
                "gradient shape {:?} does not match parameter {} shape {:?}",
                grad.shape(),
                self.name,
                self.tensor.shape()
            )));
        }
        match self.grad.as_mut() {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, factor: T) {
        if let Some(g) = self.grad.as_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Clears the momentum buffer and any pending gradient.
    pub fn reset_state(&mut self) {
        self.velocity = Tensor::zeros(self.tensor.shape());
        self.grad = None;
    }

    /// Replaces the value, resetting the momentum buffer when the shape changes.
    pub fn replace(&mut self, tensor: Tensor<T>) {
        if tensor.shape() != self.velocity.shape() {
            self.velocity = Tensor::zeros(tensor.shape());
        }
        self.tensor = tensor;
        self.grad = None;
    }
}

/// One SGD step with classical momentum:
/// `v ← momentum·v + grad`, `θ ← θ − lr·v`. Gradients are cleared afterwards.
pub fn sgd_momentum_step<T: Scalar>(params: &mut [Parameter<T>], lr: T, momentum: T) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(invalid_state(format!("trainable parameter {} has no gradient", p.name)));
    }
    for p in params.iter_mut() {
        let Some(grad) = p.grad.take() else {
            continue;
        };
        if !p.trainable {
            continue;
        }
        let values = p.tensor.data_mut();
        for ((theta, v), &g) in values.iter_mut().zip(p.velocity.data_mut()).zip(grad.data()) {
            *v = momentum * *v + g;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Parameter<f64> {
        Parameter::new("w.weight", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = [param(&[1.0, -2.0])];
        p[0].accumulate_grad(&Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap())
            .unwrap();
        sgd_momentum_step(&mut p, 1.0, 0.0).unwrap();
        assert_eq!(p[0].tensor.data(), &[0.5, -2.25]);
        assert!(p[0].grad().is_none());
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, g) = (0.1, 2.0);
        let mut p = [param(&[0.0])];
        for _ in 0..2 {
            p[0].accumulate_grad(&Tensor::scalar(g)).unwrap();
            sgd_momentum_step(&mut p, lr, 0.9).unwrap();
        }
        let expected = -lr * g * (1.0 + 1.9);
        assert!((p[0].tensor.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut p = [param(&[3.0])];
        p[0].trainable = false;
        p[0].accumulate_grad(&Tensor::scalar(1.0)).unwrap();
        sgd_momentum_step(&mut p, 1.0, 0.9).unwrap();
        assert_eq!(p[0].tensor.data(), &[3.0]);
        assert_eq!(p[0].velocity().data(), &[0.0]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = [param(&[3.0])];
        assert!(matches!(
            sgd_momentum_step(&mut p, 1.0, 0.9),
            Err(crate::Error::InvalidState(_))
        ));
    }

    #[test]
    fn layer_name() {
        assert_eq!(param(&[0.0]).layer(), "w");
    }
}
