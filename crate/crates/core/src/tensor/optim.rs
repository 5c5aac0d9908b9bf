//! Stochastic gradient descent with classical momentum and decoupled-from-
//! nothing L2 weight decay (decay is folded into the gradient before the
//! velocity update, as in the reference training recipe).

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor. Names key checkpoint entries and velocity
/// buffers, so they must be unique within a model.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter { name: name.into(), tensor: tensor.requires_grad() }
    }
}

/// Optimizer state: hyperparameters plus one velocity buffer per parameter,
/// allocated lazily on first step and kept in parameter order.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// One update over all parameters:
    ///
    ///   v ← μ·v + (g + λ·w)
    ///   w ← w − lr·v
    ///
    /// Gradients are left untouched (the caller zeroes them). Errors if any
    /// parameter has no gradient or the updated weights stop being finite.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer was initialized with {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            if v.len() != p.tensor.numel() {
                return Err(Error::Contract(format!(
                    "velocity size {} does not match parameter '{}' ({} elements)",
                    v.len(),
                    p.name,
                    p.tensor.numel()
                )));
            }
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::Contract(format!(
                    "parameter '{}' has no gradient; run backward before stepping",
                    p.name
                ))
            })?;
            p.tensor.update_data(|w| {
                for i in 0..w.len() {
                    let g = grad[i] + self.weight_decay * w[i];
                    v[i] = self.momentum * v[i] + g;
                    w[i] -= self.lr * v[i];
                }
            });
            p.tensor.with_data(|w| {
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "sgd_step" });
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[Parameter]) {
        for p in params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, data: Vec<f64>) -> Parameter {
        let n = data.len();
        Parameter::new(name, Tensor::from_vec(&[n], data).unwrap())
    }

    /// Set a gradient directly for testing the update rule in isolation.
    fn set_grad(p: &Parameter, g: &[f64]) {
        p.tensor.zero_grad();
        p.tensor.accumulate_grad(g);
    }

    #[test]
    fn vanilla_step_without_momentum_or_decay() {
        let p = param("w", vec![1.0]);
        set_grad(&p, &[2.0]);
        let mut opt = Sgd::new(0.5, 0.0, 0.0);
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.tensor.to_vec(), vec![0.0]); // 1 − 0.5·2
    }

    #[test]
    fn two_momentum_steps_compound() {
        // lr 0.1, μ 0.9, constant g = 1, w₀ = 0:
        //   v₁ = 1,   w₁ = −0.1
        //   v₂ = 1.9, w₂ = −0.29
        let p = param("w", vec![0.0]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..2 {
            set_grad(&p, &[1.0]);
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        assert!((p.tensor.item() + 0.29).abs() < 1e-12, "got {}", p.tensor.item());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        // g = 0, λ = 0.1, lr = 1, μ = 0: effective gradient is λ·w,
        // so w ← w(1 − lr·λ) = 2 · 0.9
        let p = param("w", vec![2.0]);
        set_grad(&p, &[0.0]);
        let mut opt = Sgd::new(1.0, 0.0, 0.1);
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert!((p.tensor.item() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = param("w", vec![3.0]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        assert!(matches!(opt.step(std::slice::from_ref(&p)), Err(Error::Contract(_))));
        assert_eq!(p.tensor.to_vec(), vec![3.0]);
    }

    #[test]
    fn decay_only_step() {
        // λ=1e-4, g=0, μ=0, lr=0.01: w ← 1 − 0.01·1e-4 = 1 − 1e-6
        let p = param("w", vec![1.0]);
        set_grad(&p, &[0.0]);
        let mut opt = Sgd::new(0.01, 0.0, 1e-4);
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert!((p.tensor.item() - (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn velocity_buffers_track_each_parameter() {
        let a = param("a", vec![0.0, 0.0]);
        let b = param("b", vec![0.0]);
        let mut opt = Sgd::new(1.0, 0.5, 0.0);
        set_grad(&a, &[1.0, 2.0]);
        set_grad(&b, &[3.0]);
        opt.step(&[a.clone(), b.clone()]).unwrap();
        set_grad(&a, &[0.0, 0.0]);
        set_grad(&b, &[0.0]);
        opt.step(&[a.clone(), b.clone()]).unwrap();
        // second step moves only by μ·v
        assert_eq!(a.tensor.to_vec(), vec![-1.5, -3.0]);
        assert_eq!(b.tensor.to_vec(), vec![-4.5]);
    }

    #[test]
    fn parameter_count_change_is_an_error() {
        let a = param("a", vec![0.0]);
        let b = param("b", vec![0.0]);
        set_grad(&a, &[1.0]);
        set_grad(&b, &[1.0]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(std::slice::from_ref(&a)).unwrap();
        assert!(opt.step(&[a, b]).is_err());
    }
}
