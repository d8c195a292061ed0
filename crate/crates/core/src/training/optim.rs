//! Stochastic gradient descent with momentum and coupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::params::ParamStore;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;
pub const BASE_LR: f64 = 0.05;

/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
pub fn sgd_update<T: Scalar>(
    weights: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != velocity.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} weights, {} grads, {} velocities", weights.len(), grads.len(), velocity.len()),
        ));
    }
    let (lr, mu, wd) = (T::c(lr), T::c(momentum), T::c(weight_decay));
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *w);
        *w -= lr * *v;
    }
    Ok(())
}

/// Optimizer state: hyperparameters plus one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// The training recipe defaults: lr 0.05, momentum 0.9, weight decay 1e-4.
    pub fn recipe() -> Self {
        Self::new(BASE_LR, MOMENTUM, WEIGHT_DECAY)
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Updates every parameter that carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        }
        if self.velocity.len() != store.len() {
            return Err(Error::dim("sgd_step", format!("state for {} params, store has {}", self.velocity.len(), store.len())));
        }
        for ((_, param), v) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = param.grad.as_ref() else { continue };
            if grad.shape() != param.value.shape() {
                return Err(Error::dim("sgd_step", format!("grad {:?} vs param {:?}", grad.shape(), param.value.shape())));
            }
            let grad = grad.data().to_vec();
            sgd_update(param.value.data_mut(), &grad, v, self.lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}
