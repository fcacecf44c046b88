//! InfoNCE-style contrastive loss over prediction/target sequences, and the
//! ω-weighted combination across texture variants.

use crate::models::RepSequence;
use crate::tensor::{Tape, ValueId};
use crate::{Error, Result};

/// ω₀ for the same-image term, ω_i for each texture variant. The weights
/// need not sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub same_image: f32,
    pub cross_texture: Vec<f32>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.same_image).chain(self.cross_texture.iter().copied());
        let mut any_positive = false;
        for w in all {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {w} must be a nonnegative float")));
            }
            any_positive |= w > 0.0;
        }
        if !any_positive {
            return Err(Error::Config("at least one loss weight must be positive".to_string()));
        }
        Ok(())
    }

    pub fn weight_for(&self, texture_id: u32) -> Result<f32> {
        if texture_id == 0 {
            return Ok(self.same_image);
        }
        self.cross_texture
            .get(texture_id as usize - 1)
            .copied()
            .ok_or_else(|| Error::Config(format!("no loss weight for texture id {texture_id}")))
    }
}

/// Everything the contrastive loss needs for one sample.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch {
    pub predictions: RepSequence,
    pub targets: RepSequence,
    pub train: RepSequence,
    pub texture_id: u32,
}

/// Scalar loss plus read-only diagnostics for metrics.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOutput {
    pub loss: ValueId,
    pub locations: usize,
    pub mean_positive_logit: f32,
    pub mean_negative_logit: f32,
}

/// L_c = −Σ_i log[ exp(ȳᵢᵀy̆ᵢ/τ) / (exp(ȳᵢᵀy̆ᵢ/τ) + Σ_j exp(ȳᵢᵀx̆ⱼ/τ)) ].
///
/// `paper_literal_negatives` switches the negative pairs to y̆ᵢᵀx̆ⱼ as
/// printed in the paper, which starves the predictor of negative gradient;
/// the default contrasts the prediction against the training reps.
pub fn contrastive_loss(
    tape: &mut Tape,
    batch: &ContrastiveBatch,
    temperature: f32,
    paper_literal_negatives: bool,
) -> Result<ContrastiveOutput> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let t = batch.predictions.len;
    if batch.targets.len != t {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{t} predictions vs {} targets", batch.targets.len),
        ));
    }
    if t == 0 || batch.train.len == 0 {
        return Err(Error::shape("contrastive_loss", "empty sequence".to_string()));
    }
    if batch.targets.dim != batch.predictions.dim || batch.train.dim != batch.predictions.dim {
        return Err(Error::shape("contrastive_loss", "representation dims differ".to_string()));
    }

    // positive logits: row-wise ȳᵢ·y̆ᵢ, as a [t x 1] column
    let prod = tape.mul(batch.predictions.values, batch.targets.values)?;
    let pos = tape.sum_rows(prod)?;
    let pos = tape.reshape(pos, vec![t, 1])?;

    // negative logits: [t x k²] of ȳᵢ·x̆ⱼ (or y̆ᵢ·x̆ⱼ paper-literally)
    let train_t = tape.transpose(batch.train.values)?;
    let left = if paper_literal_negatives { batch.targets.values } else { batch.predictions.values };
    let negs = tape.matmul(left, train_t)?;

    let logits = tape.concat_cols(&[pos, negs])?;
    let scaled = tape.scale(logits, 1.0 / temperature)?;
    let per_location = tape.cross_entropy_rows(scaled, &vec![0; t])?;
    let loss = tape.sum(per_location)?;

    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    Ok(ContrastiveOutput {
        loss,
        locations: t,
        mean_positive_logit: mean(tape.value(pos)),
        mean_negative_logit: mean(tape.value(negs)),
    })
}

/// L_C = ω₀·L_{c₀} + Σ_i ω_i·L_{c_i} (Eq. 4 weighting).
pub fn combined_loss(
    tape: &mut Tape,
    per_texture: &[(u32, ValueId)],
    weights: &LossWeights,
) -> Result<ValueId> {
    weights.validate()?;
    if per_texture.is_empty() {
        return Err(Error::Config("combined_loss needs at least one component".to_string()));
    }
    let mut total: Option<ValueId> = None;
    for &(texture_id, loss) in per_texture {
        let w = weights.weight_for(texture_id)?;
        let scaled = tape.scale(loss, w)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok(total.unwrap())
}
