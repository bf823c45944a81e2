//! Parameter-update rules and the cosine learning-rate schedule.
//!
//! Optimizers hold their state (momentum/moment buffers) indexed by position
//! in the parameter list, so callers must pass the same parameter list in the
//! same order on every step. Parameters without a gradient this step are
//! skipped but keep their state slot.

use alloc::string::String;
use alloc::vec::Vec;

// Float supplies cos/powi on f64 in no_std builds; with std the inherent
// methods shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// `base * (1 + cos(pi * step / total)) / 2`, the half-cosine decay from
/// `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> Result<f64, TensorError> {
    if total == 0 {
        return Err(TensorError::InvalidArgument {
            op: "cosine_lr",
            detail: String::from("total must be >= 1"),
        });
    }
    if step > total {
        return Err(TensorError::InvalidArgument {
            op: "cosine_lr",
            detail: alloc::format!("step {step} exceeds total {total}"),
        });
    }
    Ok(base * (1.0 + (core::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0)
}

/// SGD with classical momentum and coupled L2 weight decay:
/// `v = momentum * v + (g + wd * p); p -= lr * v`.
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &[Tensor<T>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| alloc::vec![T::zero(); p.numel()]).collect();
        }
        debug_assert_eq!(self.velocity.len(), params.len());
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        for (param, vel) in params.iter().zip(self.velocity.iter_mut()) {
            param.apply_grad(|data, grad| {
                for i in 0..data.len() {
                    let g = grad[i] + wd * data[i];
                    vel[i] = mu * vel[i] + g;
                    data[i] = data[i] - lr * vel[i];
                }
            });
        }
    }
}

/// Adam with bias correction; `decoupled_weight_decay` turns it into AdamW
/// (`p *= 1 - lr * wd` before the moment update).
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled_weight_decay: f64,
    t: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            decoupled_weight_decay: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adamw(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let mut a = Self::new(lr, beta1, beta2, eps);
        a.decoupled_weight_decay = weight_decay;
        a
    }

    /// Steps taken so far.
    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = T::from_f64(self.lr);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let decay = T::from_f64(1.0 - self.lr * self.decoupled_weight_decay);
        let apply_decay = self.decoupled_weight_decay != 0.0;
        for (param, (m, v)) in params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            param.apply_grad(|data, grad| {
                for i in 0..data.len() {
                    if apply_decay {
                        data[i] = data[i] * decay;
                    }
                    let g = grad[i];
                    m[i] = b1 * m[i] + one_m_b1 * g;
                    v[i] = b2 * v[i] + one_m_b2 * g * g;
                    let m_hat = m[i] * inv_bc1;
                    let v_hat = v[i] * inv_bc2;
                    data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}
