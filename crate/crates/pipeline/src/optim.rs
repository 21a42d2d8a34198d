//! AdamW with decoupled weight decay, and cosine learning-rate annealing.

use std::f64::consts::PI;

use macmd_core::{ParamStore, Scalar};

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; moment buffers follow the store's parameter order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new() }
    }

    /// One update at step `t` (counted from 1) with learning rate `lr`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, t: u64, lr: f64) -> Result<()> {
        if t < 1 {
            return Err(PipelineError::Usage("optimizer step counter starts at 1".into()));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t.min(i32::MAX as u64) as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(t.min(i32::MAX as u64) as i32));
        let (lr_t, decay, eps) = (T::of(lr), T::of(1.0 - lr * c.weight_decay), T::of(c.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_ref().map(|g| g.data());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                *w *= decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr(t) = min + ½(max − min)(1 + cos(π t / (S − 1)))` for steps `t = 0..S`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_max;
        }
        let frac = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * frac).cos())
    }
}
