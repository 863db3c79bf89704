use std::f64::consts::PI;

use crate::nn::{NnError, ParamStore, Tensor};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { base_lr: 2e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps: 1000 }
    }
}

impl AdamWConfig {
    /// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        let lr = self.base_lr * 0.5 * (1.0 + (PI * s).cos());
        // cos(π) is not exactly −1 in floating point
        if step >= self.total_steps {
            0.0
        } else {
            lr
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), NnError> {
        if grads.len() != params.len() {
            return Err(NnError::ShapeMismatch(format!("{} grads for {} parameters", grads.len(), params.len())));
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter {i}: shape {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let c = self.config;
        let lr = T::lit(c.lr_at(self.step));
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let mut sq = T::zero();
    for g in grads.iter() {
        for v in g.data() {
            sq += *v * *v;
        }
    }
    let n = sq.sqrt();
    if n > max_norm && n > T::zero() {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    n
}
