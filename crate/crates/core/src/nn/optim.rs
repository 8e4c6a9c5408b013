//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ · (1 − lr·λ)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::{Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.first.get(index)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.second.get(index)
    }
}

/// One AdamW update over parallel lists of parameters and gradients.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_shape(g.shape())?;
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.second = state.first.clone();
    } else if state.first.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        state.first[i].expect_shape(p.shape())?;
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let one = T::one();
    let lr = T::of(c.lr);
    let decay = T::of(1.0 - c.lr * c.weight_decay);
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let eps = T::of(c.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *w *= decay;
            *mi = b1 * *mi + (one - b1) * gr;
            *vi = b2 * *vi + (one - b2) * gr * gr;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// AdamW step over every parameter of a model, using the accumulated grads.
pub fn step_model<T: Scalar, M: Parameters<T> + ?Sized>(
    model: &mut M,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    model.visit("", &mut |_, p| grads.push(p.grad.clone()));
    model.visit_mut("", &mut |_, p| values.push(std::mem::replace(&mut p.value, Tensor::zeros(&[0]))));
    let result = {
        let mut refs: Vec<&mut Tensor<T>> = values.iter_mut().collect();
        let grefs: Vec<&Tensor<T>> = grads.iter().collect();
        optimizer_step(&mut refs, &grefs, state)
    };
    let mut it = values.into_iter();
    model.visit_mut("", &mut |_, p| p.value = it.next().expect("same traversal"));
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        optimizer_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_gradient_with_decay_scales() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = OptimizerState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.05,
            ..Default::default()
        });
        optimizer_step(&mut [&mut p], &[&g], &mut st).unwrap();
        let s = 1.0 - 0.1 * 0.05;
        assert_eq!(p.data(), &[1.0 * s, -2.0 * s]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g² after bias correction: Δ = lr·g/(|g|+ε)
        let (lr, g, w0, eps) = (0.01, -0.3, 0.7, 1e-8);
        let mut p = one(w0);
        let mut st = OptimizerState::new(AdamWConfig {
            lr,
            eps,
            ..Default::default()
        });
        optimizer_step(&mut [&mut p], &[&one(g)], &mut st).unwrap();
        let want = w0 - lr * g / (g.abs() + eps);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((st.first_moment(0).unwrap().data()[0] - 0.1 * g).abs() < 1e-15);
        assert!((st.second_moment(0).unwrap().data()[0] - 0.001 * g * g).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(AdamWConfig::default());
        assert!(optimizer_step(&mut [&mut p], &[&g], &mut st).is_err());
    }
}
