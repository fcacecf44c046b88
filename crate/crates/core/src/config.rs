//! Run configuration: a JSON file plus dotted-key overrides resolve into the
//! domain configs, and the fully resolved form is echoed next to every run's
//! outputs so any run can be reproduced from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::imaging::{default_bank, GridSpec, TextureTransform};
use crate::loss::LossWeights;
use crate::models::{EncoderConfig, PadMode};
use crate::sequencing::Direction;
use crate::synth::SynthConfig;
use crate::training::{FinetuneConfig, PretrainConfig, SgdConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub image_side: usize,
    pub patch_side: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { image_side: 64, patch_side: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// (out_channels, kernel, stride) per conv stage.
    pub stages: Vec<(usize, usize, usize)>,
    pub dim: usize,
    pub pad: PadMode,
    pub ar_layers: usize,
    pub ar_heads: usize,
    pub ar_ff_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        ModelSection {
            stages: enc.stages,
            dim: enc.dim,
            pad: enc.pad,
            ar_layers: 2,
            ar_heads: 4,
            ar_ff_width: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub temperature: f32,
    pub same_image_weight: f32,
    /// One weight per texture bank entry, in bank order.
    pub cross_texture_weights: Vec<f32>,
    pub paper_literal_negatives: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            temperature: 0.5,
            same_image_weight: 1.0,
            cross_texture_weights: vec![0.5; 5],
            paper_literal_negatives: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Training block side; targets form the surrounding L-shape.
    pub k: usize,
    pub directions: Vec<Direction>,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Cosine-decay the learning rate to zero over the whole run.
    pub cosine: bool,
    pub seed: u64,
    pub early_stop: bool,
    pub threads: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let opt = SgdConfig::default();
        PretrainSection {
            k: 3,
            directions: Direction::BOTH.to_vec(),
            epochs: 30,
            lr: opt.lr,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            cosine: true,
            seed: 7,
            early_stop: false,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub classes: usize,
    /// Frozen encoder: full-batch head steps. Unfrozen: dataset passes.
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub total_steps: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let opt = SgdConfig::default();
        FinetuneSection {
            classes: 4,
            epochs: 200,
            lr: 0.5,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            total_steps: opt.total_steps,
            freeze_encoder: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    pub randomize_textures: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let cfg = SynthConfig::default();
        SynthSection {
            per_class: cfg.per_class,
            side: cfg.side,
            seed: cfg.seed,
            randomize_textures: cfg.randomize_textures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub textures: Vec<TextureTransform>,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub synth: SynthSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            grid: GridSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            textures: default_bank(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let schema = serde_json::to_value(FileConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        collect_unknown_keys(&value, &schema, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config value: {e}")))
    }

    /// Apply `key.path=value` overrides. Values parse as JSON where possible
    /// and fall back to strings; every bad override is reported at once.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut value = serde_json::to_value(&*self).expect("config serializes");
        let mut problems = Vec::new();
        for raw in sets {
            if let Err(why) = apply_one(&mut value, raw) {
                problems.push(why);
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!("bad --set overrides: {}", problems.join("; "))));
        }
        *self = Self::from_value(value)?;
        Ok(())
    }

    /// Pretty JSON of every effective value, for the resolved-config echo.
    pub fn resolved_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// The sections a checkpoint must agree on to be loadable: geometry,
    /// architecture, and the texture bank. Run parameters (lr, epochs, seeds)
    /// stay out so finetune and probe can load a pretrain checkpoint.
    pub fn model_identity(&self) -> String {
        serde_json::json!({
            "grid": self.grid,
            "model": self.model,
            "textures": self.textures,
        })
        .to_string()
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.image_side, self.grid.patch_side)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { stages: self.model.stages.clone(), dim: self.model.dim, pad: self.model.pad }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            grid: self.grid_spec()?,
            k: self.pretrain.k,
            directions: self.pretrain.directions.clone(),
            bank: self.textures.clone(),
            weights: LossWeights {
                same_image: self.loss.same_image_weight,
                cross_texture: self.loss.cross_texture_weights.clone(),
            },
            temperature: self.loss.temperature,
            paper_literal_negatives: self.loss.paper_literal_negatives,
            encoder: self.encoder_config(),
            ar_layers: self.model.ar_layers,
            ar_heads: self.model.ar_heads,
            ar_ff_width: self.model.ar_ff_width,
            optimizer: SgdConfig {
                lr: self.pretrain.lr,
                momentum: self.pretrain.momentum,
                weight_decay: self.pretrain.weight_decay,
                // `pretrain` resolves any nonzero value to the full run length.
                total_steps: self.pretrain.cosine as usize,
            },
            epochs: self.pretrain.epochs,
            seed: self.pretrain.seed,
            early_stop: self.pretrain.early_stop,
            threads: self.pretrain.threads,
            diagnostics_dir: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune_config(&self, freeze_encoder: bool) -> Result<FinetuneConfig> {
        let cfg = FinetuneConfig {
            grid: self.grid_spec()?,
            classes: self.finetune.classes,
            optimizer: SgdConfig {
                lr: self.finetune.lr,
                momentum: self.finetune.momentum,
                weight_decay: self.finetune.weight_decay,
                total_steps: self.finetune.total_steps,
            },
            epochs: self.finetune.epochs,
            freeze_encoder,
            seed: self.finetune.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            per_class: self.synth.per_class,
            side: self.synth.side,
            seed: self.synth.seed,
            randomize_textures: self.synth.randomize_textures,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every object key the schema lacks, as a dotted path. Arrays are left to
/// serde: texture entries are polymorphic over the pattern kind.
fn collect_unknown_keys(user: &Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else { return };
    for (key, child) in u {
        let child_path =
            if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match s.get(key) {
            None => out.push(child_path),
            Some(known) => collect_unknown_keys(child, known, &child_path, out),
        }
    }
}

fn apply_one(value: &mut Value, raw: &str) -> std::result::Result<(), String> {
    let Some((key, text)) = raw.split_once('=') else {
        return Err(format!("'{raw}' is not key=value"));
    };
    let parsed = serde_json::from_str::<Value>(text.trim())
        .unwrap_or_else(|_| Value::String(text.trim().to_string()));
    let mut node = &mut *value;
    let mut walked = String::new();
    for seg in key.split('.') {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(seg);
        node = match node {
            Value::Object(map) => {
                map.get_mut(seg).ok_or(format!("unknown config key '{walked}'"))?
            }
            _ => return Err(format!("'{walked}' has no sub-keys")),
        };
    }
    *node = parsed;
    Ok(())
}
