//! Convolutional patch encoder: conv stages, global mean pool, L2 normalize.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kaiming, zeros, Bound, Params, RepRole, RepSequence};
use crate::imaging::PatchGrid;
use crate::tensor::{Tape, ValueId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Feed the patch to the conv stack at its native size.
    Direct,
    /// Zero-pad the patch to `side x side`, centered.
    PadToFull(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// (out_channels, kernel, stride) per conv stage.
    pub stages: Vec<(usize, usize, usize)>,
    pub dim: usize,
    pub pad: PadMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { stages: vec![(16, 3, 2), (32, 3, 2), (64, 3, 2)], dim: 64, pad: PadMode::Direct }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one conv stage".to_string()));
        }
        for &(c, k, s) in &self.stages {
            if c == 0 || k == 0 || s == 0 {
                return Err(Error::Config(format!("conv stage ({c},{k},{s}) has a zero field")));
            }
        }
        let last = self.stages.last().unwrap().0;
        if last != self.dim {
            return Err(Error::Config(format!(
                "final stage channels {last} != representation dim {}",
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: Params,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut in_ch = 3;
        for (i, &(out_ch, k, _)) in cfg.stages.iter().enumerate() {
            let fan_in = in_ch * k * k;
            params.insert(format!("enc.conv{i}.weight"), kaiming(vec![out_ch, in_ch, k, k], fan_in, rng));
            params.insert(format!("enc.conv{i}.bias"), zeros(vec![out_ch]));
            in_ch = out_ch;
        }
        Ok(Encoder { cfg, params })
    }

    /// Encode one planar `[3][p][p]` patch to an L2-normalized `[d]` vector.
    pub fn encode_patch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        patch: &[f32],
        patch_side: usize,
    ) -> Result<ValueId> {
        if patch.len() != 3 * patch_side * patch_side {
            return Err(Error::shape(
                "encode_patch",
                format!("patch has {} samples, expected {}", patch.len(), 3 * patch_side * patch_side),
            ));
        }
        let (data, side) = match self.cfg.pad {
            PadMode::Direct => (patch.to_vec(), patch_side),
            PadMode::PadToFull(full) => {
                if full < patch_side {
                    return Err(Error::Config(format!(
                        "pad target {full} smaller than patch side {patch_side}"
                    )));
                }
                let off = (full - patch_side) / 2;
                let mut padded = vec![0.0f32; 3 * full * full];
                for c in 0..3 {
                    for y in 0..patch_side {
                        let src = (c * patch_side + y) * patch_side;
                        let dst = (c * full + off + y) * full + off;
                        padded[dst..dst + patch_side]
                            .copy_from_slice(&patch[src..src + patch_side]);
                    }
                }
                (padded, full)
            }
        };
        let mut h = tape.input(vec![3, side, side], data)?;
        for (i, &(_, k, stride)) in self.cfg.stages.iter().enumerate() {
            let w = bound.id(&format!("enc.conv{i}.weight"));
            let b = bound.id(&format!("enc.conv{i}.bias"));
            h = tape.conv2d(h, w, stride, k / 2)?;
            h = tape.add_channel_bias(h, b)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.mean_pool_global(h)?;
        tape.normalize_rows(pooled)
    }

    /// Encode every grid cell, row-major, into an `[s² x d]` matrix.
    pub fn encode_grid(&self, tape: &mut Tape, bound: &Bound, grid: &PatchGrid) -> Result<RepSequence> {
        let s = grid.grid_side();
        let p = grid.spec().patch_side;
        let mut rows = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                rows.push(self.encode_patch(tape, bound, grid.patch(i, j), p)?);
            }
        }
        let values = tape.concat_rows(&rows)?;
        Ok(RepSequence { values, len: s * s, dim: self.cfg.dim, role: RepRole::Train })
    }
}
