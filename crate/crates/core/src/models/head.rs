//! Affine classifier head for fine-tuning and linear probes.

use rand_chacha::ChaCha8Rng;

use super::{kaiming, zeros, Bound, Params};
use crate::tensor::{Tape, ValueId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct LinearHead {
    pub cfg: HeadConfig,
    pub params: Params,
}

impl LinearHead {
    pub fn new(cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::Config(format!("classifier needs >= 2 classes, got {}", cfg.classes)));
        }
        if cfg.in_dim == 0 {
            return Err(Error::Config("classifier input dim must be positive".to_string()));
        }
        let mut params = Params::new();
        params.insert("head.weight", kaiming(vec![cfg.in_dim, cfg.classes], cfg.in_dim, rng));
        params.insert("head.bias", zeros(vec![cfg.classes]));
        Ok(LinearHead { cfg, params })
    }

    /// Class logits for a `[n x in_dim]` batch of representations.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, reps: ValueId) -> Result<ValueId> {
        let out = tape.matmul(reps, bound.id("head.weight"))?;
        tape.add_bias_rows(out, bound.id("head.bias"))
    }
}
