//! AdamW with decoupled weight decay, the warmup-cosine schedule and global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state: first and second moments per parameter and the number
/// of steps taken.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    pub steps: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Decay shrinks the
    /// weights by `lr * weight_decay` outside the adaptive step.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("parameter '{name}' is {:?} but its gradient is {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.steps += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                let mut wi = w.f64();
                wi -= lr * weight_decay * wi;
                let m_new = beta1 * mi.f64() + (1.0 - beta1) * gi;
                let v_new = beta2 * vi.f64() + (1.0 - beta2) * gi * gi;
                wi -= lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                *w = T::of(wi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at the last epoch.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, s: &Schedule) -> f64 {
    let warm = (s.warmup_epochs * steps_per_epoch) as f64;
    let total = (s.total_epochs * steps_per_epoch) as f64;
    let step = step as f64;
    if step < warm {
        return s.lr * step / warm;
    }
    let span = (total - warm).max(1.0);
    let progress = ((step - warm) / span).min(1.0);
    s.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = T::of(v.f64() * k);
            }
        }
    }
    norm
}
