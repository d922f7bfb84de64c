//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, pow, sqrt};

use crate::error::{bail, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

/// Optimizer state. Buffers mirror the trainable entries of one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    /// SGD momentum or Adam first moment, one buffer per store entry.
    pub first: Vec<Vec<f64>>,
    /// Adam second moment (empty for SGD).
    pub second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam(_) => zeros.clone(),
            OptimizerKind::Sgd(_) => Vec::new(),
        };
        Optimizer { kind, step: 0, first: zeros, second }
    }

    pub fn sgd(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd(SgdConfig { momentum, weight_decay }), store)
    }

    pub fn adam(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self::new(OptimizerKind::Adam(cfg), store)
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            bail!(Usage, "optimizer tracks {} tensors, store has {}", self.first.len(), store.len());
        }
        for (b, e) in self.first.iter().zip(store.entries()) {
            if b.len() != e.value.len() || e.grad.len() != e.value.len() {
                bail!(Usage, "optimizer buffer shape mismatch for {}", e.name);
            }
        }
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the store's gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.check(store)?;
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd(cfg) => {
                for (e, buf) in store.entries_mut().iter_mut().zip(self.first.iter_mut()) {
                    if !e.trainable {
                        continue;
                    }
                    let grad = &e.grad;
                    for ((p, b), &g) in e.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                        let d = g + cfg.weight_decay * *p;
                        *b = cfg.momentum * *b + d;
                        *p -= lr * *b;
                    }
                }
            }
            OptimizerKind::Adam(cfg) => {
                let bc1 = 1.0 - pow(cfg.beta1, self.step as f64);
                let bc2 = 1.0 - pow(cfg.beta2, self.step as f64);
                for ((e, m), v) in store.entries_mut().iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
                    if !e.trainable {
                        continue;
                    }
                    let grad = &e.grad;
                    for (((p, m), v), &g) in e.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                        let d = g + cfg.weight_decay * *p;
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * d;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * d * d;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (sqrt(vhat) + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        bail!(Config, "cosine schedule needs a positive horizon");
    }
    if t > total {
        bail!(Config, "step {} beyond schedule horizon {}", t, total);
    }
    let phase = core::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + (lr_max - lr_min) * (1.0 + cos(phase)) / 2.0)
}
