//! Python bindings over the core crate: config handling, synthetic data,
//! grid geometry, pretraining, probing, and checkpoints.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use scpc_core::cli::gridcheck_dump;
use scpc_core::config::FileConfig;
use scpc_core::imaging::{make_variants, resize, Image as CoreImage};
use scpc_core::models::{Autoregressor, Encoder};
use scpc_core::rng::{stream, stream_rng};
use scpc_core::sequencing::{build_sequences, enumerate_anchors, AnchorSpec, Direction};
use scpc_core::synth;
use scpc_core::training::{
    evaluate, finetune, load_pretrained, pretrain, representation_matrix, save_checkpoint,
    texture_similarity, MetricsWriter,
};

fn err(e: scpc_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_direction(name: &str) -> PyResult<Direction> {
    match name {
        "forward" => Ok(Direction::Forward),
        "backward" => Ok(Direction::Backward),
        other => Err(PyValueError::new_err(format!(
            "direction must be \"forward\" or \"backward\", got {other:?}"
        ))),
    }
}

/// A float image in [0,1], stored row-major with interleaved channels.
#[pyclass(frozen)]
#[derive(Clone)]
struct Image {
    inner: CoreImage,
}

#[pymethods]
impl Image {
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<f32>) -> PyResult<Self> {
        Ok(Image { inner: CoreImage::new(height, width, pixels).map_err(err)? })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn pixels(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn resized(&self, side: usize) -> PyResult<Image> {
        Ok(Image { inner: resize(&self.inner, side).map_err(err)? })
    }

    /// The image followed by one variant per texture in the config bank.
    fn variants(&self, config: &Config) -> PyResult<Vec<Image>> {
        let out = make_variants(&self.inner, &config.inner.textures).map_err(err)?;
        Ok(out.into_iter().map(|inner| Image { inner }).collect())
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Run configuration; accepts the same JSON documents and dotted-key
/// overrides as the command-line tool.
#[pyclass]
struct Config {
    inner: FileConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => FileConfig::from_json(text).map_err(err)?,
            None => FileConfig::default(),
        };
        Ok(Config { inner })
    }

    /// Apply `section.key=value` overrides; values parse as JSON first.
    fn set(&mut self, overrides: Vec<String>) -> PyResult<()> {
        self.inner.apply_overrides(&overrides).map_err(err)
    }

    /// The fully resolved config as pretty JSON; rerunnable as-is.
    fn resolved(&self) -> String {
        self.inner.resolved_json()
    }

    /// The compact model-identity JSON embedded in checkpoints.
    fn model_identity(&self) -> String {
        self.inner.model_identity()
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.model_identity())
    }
}

/// A pretrained encoder/autoregressor pair tied to its model identity.
#[pyclass(frozen)]
struct Model {
    encoder: Encoder,
    autoregressor: Autoregressor,
    identity: String,
}

#[pymethods]
impl Model {
    /// Contrastive pretraining; returns the model and per-step metrics as
    /// JSON strings (the same records the CLI writes to metrics.jsonl).
    #[staticmethod]
    fn pretrain(config: &Config, images: Vec<Image>) -> PyResult<(Model, Vec<String>)> {
        let cfg = config.inner.pretrain_config().map_err(err)?;
        let dataset: Vec<CoreImage> = images.into_iter().map(|i| i.inner).collect();
        let mut metrics = MetricsWriter::buffer();
        let result = pretrain(&dataset, &cfg, &mut metrics).map_err(err)?;
        let lines = match metrics {
            MetricsWriter::Buffer(records) => records
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serializes"))
                .collect(),
            _ => unreachable!(),
        };
        let model = Model {
            encoder: result.encoder,
            autoregressor: result.autoregressor,
            identity: config.inner.model_identity(),
        };
        Ok((model, lines))
    }

    /// Restore a checkpoint; fails on a model-identity mismatch unless forced.
    #[staticmethod]
    #[pyo3(signature = (config, path, force=false))]
    fn load(config: &Config, path: &str, force: bool) -> PyResult<Model> {
        let cfg = config.inner.pretrain_config().map_err(err)?;
        let mut rng = stream_rng(cfg.seed, stream::INIT);
        let mut encoder = Encoder::new(cfg.encoder.clone(), &mut rng).map_err(err)?;
        let mut ar = Autoregressor::new(cfg.autoregressor_config(), &mut rng).map_err(err)?;
        let identity = config.inner.model_identity();
        load_pretrained(Path::new(path), &mut encoder, Some(&mut ar), &identity, force)
            .map_err(err)?;
        Ok(Model { encoder, autoregressor: ar, identity })
    }

    /// A freshly initialized (untrained) model for baselines.
    #[staticmethod]
    fn random_init(config: &Config) -> PyResult<Model> {
        let cfg = config.inner.pretrain_config().map_err(err)?;
        let mut rng = stream_rng(cfg.seed, stream::INIT);
        Ok(Model {
            encoder: Encoder::new(cfg.encoder.clone(), &mut rng).map_err(err)?,
            autoregressor: Autoregressor::new(cfg.autoregressor_config(), &mut rng)
                .map_err(err)?,
            identity: config.inner.model_identity(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(
            Path::new(path),
            &self.identity,
            self.encoder.params.entries().chain(self.autoregressor.params.entries()),
        )
        .map_err(err)
    }

    /// Mean-pooled image representation, one flat vector per image.
    fn embed(&self, config: &Config, images: Vec<Image>) -> PyResult<Vec<Vec<f32>>> {
        let grid = config.inner.grid_spec().map_err(err)?;
        let dataset: Vec<CoreImage> = images.into_iter().map(|i| i.inner).collect();
        let reps = representation_matrix(&self.encoder, dataset.iter(), grid).map_err(err)?;
        let d = reps.shape()[1];
        Ok(reps.data().chunks_exact(d).map(|row| row.to_vec()).collect())
    }

    /// Mean cosine between each patch and its textured counterparts.
    fn texture_similarity(&self, config: &Config, images: Vec<Image>) -> PyResult<f32> {
        let grid = config.inner.grid_spec().map_err(err)?;
        let dataset: Vec<CoreImage> = images.into_iter().map(|i| i.inner).collect();
        texture_similarity(&self.encoder, &dataset, &config.inner.textures, grid).map_err(err)
    }

    /// Fit a linear probe on the frozen encoder; returns train and eval
    /// accuracy.
    fn probe(
        &self,
        config: &Config,
        train_images: Vec<Image>,
        train_labels: Vec<u32>,
        eval_images: Vec<Image>,
        eval_labels: Vec<u32>,
    ) -> PyResult<(f32, f32)> {
        if train_images.len() != train_labels.len() || eval_images.len() != eval_labels.len() {
            return Err(PyValueError::new_err("images and labels must have equal length"));
        }
        let cfg = config.inner.finetune_config(true).map_err(err)?;
        let train: Vec<(CoreImage, u32)> =
            train_images.into_iter().map(|i| i.inner).zip(train_labels).collect();
        let eval: Vec<(CoreImage, u32)> =
            eval_images.into_iter().map(|i| i.inner).zip(eval_labels).collect();
        let fit = finetune(&train, self.encoder.clone(), &cfg).map_err(err)?;
        let eval_acc = evaluate(&fit.encoder, &fit.head, &eval, cfg.grid).map_err(err)?;
        Ok((fit.train_accuracy, eval_acc))
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.identity)
    }
}

/// Valid anchor coordinates for one direction on an s x s grid.
#[pyfunction]
fn anchors(grid_side: usize, k: usize, direction: &str) -> PyResult<Vec<(usize, usize)>> {
    let anchors = enumerate_anchors(grid_side, k, parse_direction(direction)?).map_err(err)?;
    Ok(anchors.into_iter().map(|a| a.anchor).collect())
}

/// Training-block and target coordinates for one anchor.
#[pyfunction]
fn sequences(
    grid_side: usize,
    k: usize,
    direction: &str,
    anchor: (usize, usize),
) -> PyResult<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let spec = AnchorSpec { anchor, k, direction: parse_direction(direction)?, grid_side };
    let (train, target) = build_sequences(&spec).map_err(err)?;
    Ok((train.coords, target.coords))
}

/// The frozen gridcheck dump for the config's grid (CLI parity).
#[pyfunction]
#[pyo3(signature = (config, direction=None))]
fn gridcheck(config: &Config, direction: Option<&str>) -> PyResult<String> {
    let spec = config.inner.grid_spec().map_err(err)?;
    let directions = match direction {
        Some(name) => vec![parse_direction(name)?],
        None => Direction::BOTH.to_vec(),
    };
    gridcheck_dump(spec, config.inner.pretrain.k, &directions).map_err(err)
}

/// The labeled synthetic shapes corpus described by the config.
#[pyfunction]
fn generate_corpus(config: &Config) -> PyResult<(Vec<Image>, Vec<u32>)> {
    let cfg = config.inner.synth_config().map_err(err)?;
    let corpus = synth::generate(&cfg).map_err(err)?;
    let mut images = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (inner, label) in corpus {
        images.push(Image { inner });
        labels.push(label);
    }
    Ok((images, labels))
}

/// Names of the synthetic shape classes, indexed by label.
#[pyfunction]
fn class_names() -> Vec<String> {
    synth::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[pymodule]
fn scpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(anchors, m)?)?;
    m.add_function(wrap_pyfunction!(sequences, m)?)?;
    m.add_function(wrap_pyfunction!(gridcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    Ok(())
}
