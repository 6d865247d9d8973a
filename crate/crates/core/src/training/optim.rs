use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64` whatever
/// the parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update from the gradients stored in `store`. Parameters
    /// without a gradient (frozen) are left untouched, moments included.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        ensure!(self.m.len() == store.len(), "optimizer tracks {} tensors, store has {}", self.m.len(), store.len());
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ensure!(m.len() == t.len(), "moment buffer of {} values for tensor of {}", m.len(), t.len());
            let Some(g) = t.grad.take() else { continue };
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mut x = p.as_f64();
                x -= lr * c.weight_decay * x;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p = T::of(x);
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

/// Rescales all stored gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for t in store.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}
