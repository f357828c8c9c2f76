//! Adam parameter updates.

use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// A named trainable tensor together with its Adam moment buffers.
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    lr_mult: T,
}

impl<T: Scalar> Parameter<T> {
    /// Wraps `tensor` and marks it for gradient accumulation.
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        tensor.set_requires_grad(true);
        let n = tensor.numel();
        Parameter {
            name: name.into(),
            tensor,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            lr_mult: T::one(),
        }
    }

    /// Scales this parameter's effective learning rate in [`adam_step`].
    pub fn set_lr_mult(&mut self, mult: T) {
        self.lr_mult = mult;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over every parameter whose
/// gradient is populated; those gradients are zeroed afterwards.
/// Parameters without a gradient are left untouched.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], lr: T, beta1: T, beta2: T, eps: T) {
    for p in params {
        let Some(grad) = p.tensor.grad() else { continue };
        p.step += 1;
        let lr_p = lr * p.lr_mult;
        let bc1 = T::one() - beta1.powi(p.step as i32);
        let bc2 = T::one() - beta2.powi(p.step as i32);
        p.tensor.modify(|data| {
            for i in 0..data.len() {
                let g = grad[i];
                p.m[i] = beta1 * p.m[i] + (T::one() - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (T::one() - beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                data[i] -= lr_p * m_hat / (v_hat.sqrt() + eps);
            }
        });
        p.tensor.zero_grad();
    }
}

/// Conventional defaults: β1 from the momentum setting, β2 and eps as
/// commonly published.
pub fn adam_defaults<T: Scalar>() -> (T, T, T) {
    (sc(0.9), sc(0.999), sc(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Parameter<f64> {
        Parameter::new("p", Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    fn push_grad(p: &Parameter<f64>, g: f64) {
        p.tensor.scale(g).sum().backward().unwrap();
    }

    #[test]
    fn first_step_has_closed_form_magnitude() {
        let lr = 0.1;
        let g = 0.5;
        let mut ps = vec![param(2.0)];
        push_grad(&ps[0], g);
        adam_step(&mut ps, lr, 0.9, 0.999, 1e-8);
        let expect = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!((ps[0].tensor.value() - expect).abs() < 1e-15);
        assert!(ps[0].tensor.grad().is_none(), "grad must be zeroed after the step");
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = vec![param(1.5)];
        push_grad(&ps[0], 0.0);
        adam_step(&mut ps, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(ps[0].tensor.value(), 1.5);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut ps = vec![param(1.5)];
        adam_step(&mut ps, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(ps[0].tensor.value(), 1.5);
        assert_eq!(ps[0].step_count(), 0);
    }

    #[test]
    fn lr_mult_scales_the_step_exactly() {
        let lr = 0.1;
        let g = 0.5;
        let mut ps = vec![param(2.0), param(2.0)];
        ps[1].set_lr_mult(8.0);
        for p in &ps {
            push_grad(p, g);
        }
        adam_step(&mut ps, lr, 0.9, 0.999, 1e-8);
        let base = 2.0 - ps[0].tensor.value();
        let scaled = 2.0 - ps[1].tensor.value();
        assert!((scaled - 8.0 * base).abs() < 1e-15, "{scaled} != 8*{base}");
    }

    #[test]
    fn two_steps_descend_a_convex_quadratic() {
        let mut ps = vec![param(0.0)];
        let loss_at = |x: f64| (x - 3.0) * (x - 3.0);
        let mut prev = loss_at(ps[0].tensor.value());
        for _ in 0..2 {
            let x = &ps[0].tensor;
            let shifted = x.offset(-3.0);
            shifted.mul(&shifted).unwrap().sum().backward().unwrap();
            adam_step(&mut ps, 0.05, 0.9, 0.999, 1e-8);
            let now = loss_at(ps[0].tensor.value());
            assert!(now < prev, "loss must decrease: {now} !< {prev}");
            prev = now;
        }
    }
}
