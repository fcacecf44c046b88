//! Attention autoregressor: predicts target-patch representations from the
//! training block via learned query tokens with 2D positional encodings.

use rand_chacha::ChaCha8Rng;

use super::{flat_indices, kaiming, ones, small_uniform, zeros, Bound, Params, RepRole, RepSequence};
use crate::tensor::{Tape, ValueId};
use crate::{Error, Result};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoregressorConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_width: usize,
    /// Positional table covers all (row, col) of this grid side.
    pub grid_side: usize,
}

impl Default for AutoregressorConfig {
    fn default() -> Self {
        AutoregressorConfig { layers: 2, heads: 4, dim: 64, ff_width: 128, grid_side: 7 }
    }
}

impl AutoregressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ff_width == 0 || self.grid_side == 0 {
            return Err(Error::Config("autoregressor sizes must be positive".to_string()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Autoregressor {
    pub cfg: AutoregressorConfig,
    pub params: Params,
}

impl Autoregressor {
    pub fn new(cfg: AutoregressorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = d / cfg.heads;
        let mut params = Params::new();
        let s2 = cfg.grid_side * cfg.grid_side;
        params.insert("ar.pos.table", small_uniform(vec![s2, d], 0.02, rng));
        params.insert("ar.role.query", small_uniform(vec![d], 0.02, rng));
        for l in 0..cfg.layers {
            params.insert(format!("ar.layer{l}.ln1.gain"), ones(vec![d]));
            params.insert(format!("ar.layer{l}.ln1.bias"), zeros(vec![d]));
            for h in 0..cfg.heads {
                for w in ["wq", "wk", "wv"] {
                    params.insert(format!("ar.layer{l}.head{h}.{w}"), kaiming(vec![d, dh], d, rng));
                }
            }
            params.insert(format!("ar.layer{l}.attn.wo"), kaiming(vec![d, d], d, rng));
            params.insert(format!("ar.layer{l}.ln2.gain"), ones(vec![d]));
            params.insert(format!("ar.layer{l}.ln2.bias"), zeros(vec![d]));
            params.insert(format!("ar.layer{l}.ff.w1"), kaiming(vec![d, cfg.ff_width], d, rng));
            params.insert(format!("ar.layer{l}.ff.b1"), zeros(vec![cfg.ff_width]));
            params.insert(format!("ar.layer{l}.ff.w2"), kaiming(vec![cfg.ff_width, d], cfg.ff_width, rng));
            params.insert(format!("ar.layer{l}.ff.b2"), zeros(vec![d]));
        }
        params.insert("ar.out.weight", kaiming(vec![d, d], d, rng));
        params.insert("ar.out.bias", zeros(vec![d]));
        Ok(Autoregressor { cfg, params })
    }

    /// One pre-LN transformer block over `[n x d]` token states.
    fn block(&self, tape: &mut Tape, bound: &Bound, l: usize, x: ValueId) -> Result<ValueId> {
        let g1 = bound.id(&format!("ar.layer{l}.ln1.gain"));
        let b1 = bound.id(&format!("ar.layer{l}.ln1.bias"));
        let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let wq = bound.id(&format!("ar.layer{l}.head{h}.wq"));
            let wk = bound.id(&format!("ar.layer{l}.head{h}.wk"));
            let wv = bound.id(&format!("ar.layer{l}.head{h}.wv"));
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            heads.push(tape.attention(q, k, v)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = bound.id(&format!("ar.layer{l}.attn.wo"));
        let proj = tape.matmul(cat, wo)?;
        let x = tape.add(x, proj)?;

        let g2 = bound.id(&format!("ar.layer{l}.ln2.gain"));
        let b2 = bound.id(&format!("ar.layer{l}.ln2.bias"));
        let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = bound.id(&format!("ar.layer{l}.ff.w1"));
        let fb1 = bound.id(&format!("ar.layer{l}.ff.b1"));
        let w2 = bound.id(&format!("ar.layer{l}.ff.w2"));
        let fb2 = bound.id(&format!("ar.layer{l}.ff.b2"));
        let h1 = tape.matmul(normed, w1)?;
        let h1 = tape.add_bias_rows(h1, fb1)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add_bias_rows(h2, fb2)?;
        tape.add(x, h2)
    }

    /// Predict L2-normalized representations for every target coordinate.
    pub fn predict_targets(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        train_reps: &RepSequence,
        train_coords: &[(usize, usize)],
        target_coords: &[(usize, usize)],
    ) -> Result<RepSequence> {
        if train_reps.len != train_coords.len() {
            return Err(Error::shape(
                "predict_targets",
                format!("{} train reps vs {} coords", train_reps.len, train_coords.len()),
            ));
        }
        let s = self.cfg.grid_side;
        let pos = bound.id("ar.pos.table");
        let train_idx = flat_indices(train_coords, s)?;
        let target_idx = flat_indices(target_coords, s)?;

        let train_pos = tape.embed(pos, &train_idx)?;
        let inputs = tape.add(train_reps.values, train_pos)?;
        let target_pos = tape.embed(pos, &target_idx)?;
        let queries = tape.add_bias_rows(target_pos, bound.id("ar.role.query"))?;

        let mut x = tape.concat_rows(&[inputs, queries])?;
        for l in 0..self.cfg.layers {
            x = self.block(tape, bound, l, x)?;
        }
        let sliced = tape.slice_rows(x, train_coords.len(), target_coords.len())?;
        let out = tape.matmul(sliced, bound.id("ar.out.weight"))?;
        let out = tape.add_bias_rows(out, bound.id("ar.out.bias"))?;
        let values = tape.normalize_rows(out)?;
        Ok(RepSequence { values, len: target_coords.len(), dim: self.cfg.dim, role: RepRole::Predicted })
    }
}
