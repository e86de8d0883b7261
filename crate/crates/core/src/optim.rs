//! Adaptive-moment optimizer with decoupled weight decay, and cosine annealing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f32,
    pub min_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {:?}", self)))
        }
    }
}

/// Learning rate for `epoch` (0-based) of `total` under cosine annealing
/// from `base` down to `floor`.
pub fn cosine_lr(base: f32, floor: f32, epoch: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
    let lr = floor as f64 + 0.5 * (base - floor) as f64 * (1.0 + (std::f64::consts::PI * t).cos());
    lr as f32
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW. Weight decay applies to tensors of rank ≥ 2 only (weights, tables),
/// never to biases or norm parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f32>)], lr: f32) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.cfg.beta2 as f64).powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::dim("adamw", format!("gradient size mismatch for {}", name)));
            }
            let decay = if p.rank() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mhat = st.m[i] as f64 / bc1;
                let vhat = st.v[i] as f64 / bc2;
                *w -= lr * decay * *w;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }
}
