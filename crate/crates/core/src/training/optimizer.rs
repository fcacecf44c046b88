//! SGD with momentum and optional cosine learning-rate decay.

use std::collections::HashMap;

use crate::models::Params;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Cosine-decay the learning rate to zero over `total_steps` (0 = constant).
    pub total_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 0.0, total_steps: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0,1)", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: HashMap<String, Vec<f32>>,
    step: usize,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd { cfg, velocity: HashMap::new(), step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        if self.cfg.total_steps == 0 {
            return self.cfg.lr;
        }
        let t = (step as f32 / self.cfg.total_steps as f32).min(1.0);
        self.cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }

    /// Apply one update across every parameter store, consuming gradients.
    pub fn step(&mut self, stores: &mut [&mut Params]) {
        let lr = self.lr_at(self.step);
        for store in stores.iter_mut() {
            for (name, t) in store.entries_mut() {
                let Some(grad) = t.grad() else { continue };
                let grad = grad.to_vec();
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let data = t.data_mut();
                for i in 0..data.len() {
                    let g = grad[i] + self.cfg.weight_decay * data[i];
                    v[i] = self.cfg.momentum * v[i] + g;
                    data[i] -= lr * v[i];
                }
            }
            store.zero_grads();
        }
        self.step += 1;
    }
}
