//! Training workflows: contrastive pretraining, supervised finetuning, and
//! frozen-encoder probing.

mod checkpoint;
mod metrics;
mod optimizer;

pub use checkpoint::{
    config_digest, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use optimizer::{Sgd, SgdConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imaging::{
    extract_grid, make_variants, resize, GridSpec, Image, PatchGrid, TextureTransform,
};
use crate::loss::{
    combined_loss, contrastive_loss, ContrastiveBatch, ContrastiveOutput, LossWeights,
};
use crate::models::{
    flat_indices, Autoregressor, AutoregressorConfig, Bound, Encoder, EncoderConfig, HeadConfig,
    LinearHead, RepRole, RepSequence,
};
use crate::rng::{stream, stream_rng};
use crate::sequencing::{make_samples, ContrastiveSample, Direction};
use crate::tensor::{Tape, Tensor, ValueId};

/// Relative epoch-loss improvement below this counts as a stall.
const EARLY_STOP_REL_TOL: f32 = 1e-3;
/// Consecutive stalled epochs before early stop triggers.
const EARLY_STOP_PATIENCE: usize = 3;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub grid: GridSpec,
    /// Training block side; targets form the surrounding L-shape.
    pub k: usize,
    pub directions: Vec<Direction>,
    /// Texture id `t` for samples/weights is the bank position + 1
    /// (0 is the untransformed image).
    pub bank: Vec<TextureTransform>,
    pub weights: LossWeights,
    pub temperature: f32,
    pub paper_literal_negatives: bool,
    pub encoder: EncoderConfig,
    pub ar_layers: usize,
    pub ar_heads: usize,
    pub ar_ff_width: usize,
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after `EARLY_STOP_PATIENCE` epochs with relative improvement
    /// below `EARLY_STOP_REL_TOL`.
    pub early_stop: bool,
    /// Samples within one step run on this many independent tapes and merge
    /// gradients by summation. 1 is the serial baseline; >1 may differ from
    /// it bitwise (float summation order) but is deterministic for a fixed
    /// thread count.
    pub threads: usize,
    /// Where to dump parameters and context if the loss goes non-finite.
    pub diagnostics_dir: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            grid: GridSpec::new(64, 16).expect("default grid is valid"),
            k: 3,
            directions: Direction::BOTH.to_vec(),
            bank: crate::imaging::default_bank(),
            weights: LossWeights { same_image: 1.0, cross_texture: vec![0.5; 5] },
            temperature: 0.5,
            paper_literal_negatives: false,
            encoder: EncoderConfig::default(),
            ar_layers: 2,
            ar_heads: 4,
            ar_ff_width: 128,
            optimizer: SgdConfig::default(),
            epochs: 30,
            seed: 7,
            early_stop: false,
            threads: 1,
            diagnostics_dir: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.grid.grid_side();
        if self.k == 0 {
            return Err(Error::Config("perception k must be >= 1".to_string()));
        }
        if s < self.k + 2 {
            return Err(Error::Config(format!(
                "grid side {s} leaves no anchors for k={} (needs k+2)",
                self.k
            )));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("at least one prediction direction is required".to_string()));
        }
        if self.weights.cross_texture.len() != self.bank.len() {
            return Err(Error::Config(format!(
                "{} cross-texture weights for {} bank transforms",
                self.weights.cross_texture.len(),
                self.bank.len()
            )));
        }
        self.weights.validate()?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".to_string()));
        }
        self.encoder.validate()?;
        self.autoregressor_config().validate()?;
        self.optimizer.validate()
    }

    pub fn autoregressor_config(&self) -> AutoregressorConfig {
        AutoregressorConfig {
            layers: self.ar_layers,
            heads: self.ar_heads,
            dim: self.encoder.dim,
            ff_width: self.ar_ff_width,
            grid_side: self.grid.grid_side(),
        }
    }
}

#[derive(Debug)]
pub struct PretrainResult {
    pub encoder: Encoder,
    pub autoregressor: Autoregressor,
    pub steps: usize,
    /// Mean combined loss per completed epoch.
    pub epoch_losses: Vec<f32>,
}

/// Run contrastive pretraining over `dataset`. One optimizer step per image;
/// metrics are emitted per step.
pub fn pretrain(
    dataset: &[Image],
    cfg: &PretrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("pretraining needs at least one image".to_string()));
    }

    let mut init_rng = stream_rng(cfg.seed, stream::INIT);
    let mut encoder = Encoder::new(cfg.encoder.clone(), &mut init_rng)?;
    let mut ar = Autoregressor::new(cfg.autoregressor_config(), &mut init_rng)?;

    let mut sgd = Sgd::new(SgdConfig {
        total_steps: if cfg.optimizer.total_steps > 0 { cfg.epochs * dataset.len() } else { 0 },
        ..cfg.optimizer
    })?;
    let mut order_rng = stream_rng(cfg.seed, stream::DATA_ORDER);

    let start = Instant::now();
    let mut step: u64 = 0;
    let mut epoch_losses: Vec<f32> = Vec::new();
    let mut stalled = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0f64;
        for &img_idx in &order {
            let record =
                pretrain_step(&mut encoder, &mut ar, &mut sgd, &dataset[img_idx], cfg, step, epoch as u64, start)
                    .map_err(|e| dump_divergence(cfg, &encoder, &ar, step, epoch, img_idx, e))?;
            epoch_sum += record.combined_loss as f64;
            metrics.emit(&record)?;
            step += 1;
        }
        let mean = (epoch_sum / dataset.len() as f64) as f32;
        if let Some(&prev) = epoch_losses.last() {
            let rel = (prev - mean) / f32::max(prev.abs(), f32::MIN_POSITIVE);
            stalled = if rel < EARLY_STOP_REL_TOL { stalled + 1 } else { 0 };
        }
        epoch_losses.push(mean);
        if cfg.early_stop && stalled >= EARLY_STOP_PATIENCE {
            break;
        }
    }
    metrics.finish()?;
    Ok(PretrainResult { encoder, autoregressor: ar, steps: sgd.steps_taken(), epoch_losses })
}

/// One image: encode all texture-variant grids, score every contrastive
/// sample, combine with the texture weights, and take one SGD step.
fn pretrain_step(
    encoder: &mut Encoder,
    ar: &mut Autoregressor,
    sgd: &mut Sgd,
    image: &Image,
    cfg: &PretrainConfig,
    step: u64,
    epoch: u64,
    start: Instant,
) -> Result<MetricsRecord> {
    let side = cfg.grid.image_side;
    let resized;
    let image = if image.height() == side && image.width() == side {
        image
    } else {
        resized = resize(image, side)?;
        &resized
    };
    let variants = make_variants(image, &cfg.bank)?;
    let grids = variants
        .iter()
        .enumerate()
        .map(|(t, v)| extract_grid(v, cfg.grid, t as u32))
        .collect::<Result<Vec<_>>>()?;
    let samples = make_samples(&grids, cfg.k, &cfg.directions)?;

    if cfg.threads > 1 {
        return parallel_step(encoder, ar, sgd, &grids, &samples, cfg, step, epoch, start);
    }

    let mut tape = Tape::new();
    let enc_bound = encoder.params.bind(&mut tape);
    let ar_bound = ar.params.bind(&mut tape);
    let reps = grids
        .iter()
        .map(|g| encoder.encode_grid(&mut tape, &enc_bound, g))
        .collect::<Result<Vec<_>>>()?;

    let s = cfg.grid.grid_side();
    let dim = cfg.encoder.dim;
    // per texture id: (running loss sum, locations contributing to it)
    let mut per_texture: BTreeMap<u32, (ValueId, usize)> = BTreeMap::new();
    let mut pos_sum = 0.0f64;
    let mut neg_sum = 0.0f64;
    for sample in &samples {
        let t = sample.target.texture_id;
        let out = sample_loss(
            &mut tape,
            ar,
            &ar_bound,
            reps[0].values,
            reps[t as usize].values,
            s,
            dim,
            sample,
            cfg,
        )?;
        pos_sum += out.mean_positive_logit as f64;
        neg_sum += out.mean_negative_logit as f64;
        match per_texture.remove(&t) {
            None => {
                per_texture.insert(t, (out.loss, out.locations));
            }
            Some((acc, n)) => {
                let acc = tape.add(acc, out.loss)?;
                per_texture.insert(t, (acc, n + out.locations));
            }
        }
    }

    let components: Vec<(u32, ValueId)> =
        per_texture.iter().map(|(&t, &(acc, _))| (t, acc)).collect();
    let combined = combined_loss(&mut tape, &components, &cfg.weights)?;
    let combined_value = tape.value(combined)[0];
    tape.backward(combined)?;
    encoder.params.absorb_grads(&tape, &enc_bound);
    ar.params.absorb_grads(&tape, &ar_bound);
    sgd.step(&mut [&mut encoder.params, &mut ar.params]);

    let per_texture_loss = per_texture
        .iter()
        .map(|(&t, &(acc, n))| (t, tape.value(acc)[0] / n as f32))
        .collect();
    MetricsRecord {
        step,
        epoch,
        per_texture_loss,
        combined_loss: combined_value,
        mean_positive_logit: (pos_sum / samples.len() as f64) as f32,
        mean_negative_logit: (neg_sum / samples.len() as f64) as f32,
        wall_time_ms: start.elapsed().as_millis() as u64,
    }
    .validated()
}

/// InfoNCE loss for one anchor sample given encoded grids already on the tape.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    tape: &mut Tape,
    ar: &Autoregressor,
    ar_bound: &Bound,
    train_mat: ValueId,
    target_mat: ValueId,
    s: usize,
    dim: usize,
    sample: &ContrastiveSample,
    cfg: &PretrainConfig,
) -> Result<ContrastiveOutput> {
    let train_vals = tape.embed(train_mat, &flat_indices(&sample.train.coords, s)?)?;
    let target_vals = tape.embed(target_mat, &flat_indices(&sample.target.coords, s)?)?;
    let train = RepSequence {
        values: train_vals,
        len: sample.train.coords.len(),
        dim,
        role: RepRole::Train,
    };
    let targets = RepSequence {
        values: target_vals,
        len: sample.target.coords.len(),
        dim,
        role: RepRole::TargetEncoded,
    };
    let predictions =
        ar.predict_targets(tape, ar_bound, &train, &sample.train.coords, &sample.target.coords)?;
    contrastive_loss(
        tape,
        &ContrastiveBatch { predictions, targets, train, texture_id: sample.target.texture_id },
        cfg.temperature,
        cfg.paper_literal_negatives,
    )
}

/// Per-thread result of a parallel step, merged in thread order.
struct ThreadShare {
    grads: Vec<(String, Vec<f32>)>,
    per_texture: BTreeMap<u32, (f64, usize)>,
    pos_sum: f64,
    neg_sum: f64,
    weighted: f64,
}

/// Samples split round-robin across worker threads, each forwarding on its
/// own tape against a shared snapshot of the parameters. Gradients of the
/// weighted losses add up to the same combined objective as the serial path
/// up to float summation order.
fn parallel_step(
    encoder: &mut Encoder,
    ar: &mut Autoregressor,
    sgd: &mut Sgd,
    grids: &[PatchGrid],
    samples: &[ContrastiveSample],
    cfg: &PretrainConfig,
    step: u64,
    epoch: u64,
    start: Instant,
) -> Result<MetricsRecord> {
    let n_threads = cfg.threads.min(samples.len());
    let chunks: Vec<Vec<usize>> =
        (0..n_threads).map(|j| (j..samples.len()).step_by(n_threads).collect()).collect();
    let s = cfg.grid.grid_side();
    let dim = cfg.encoder.dim;
    let enc_ref: &Encoder = encoder;
    let ar_ref: &Autoregressor = ar;

    let results: Vec<Result<ThreadShare>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    let mut tape = Tape::new();
                    let enc_bound = enc_ref.params.bind(&mut tape);
                    let ar_bound = ar_ref.params.bind(&mut tape);
                    let mut reps: Vec<Option<RepSequence>> = vec![None; grids.len()];
                    let mut per_texture: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
                    let mut pos_sum = 0.0f64;
                    let mut neg_sum = 0.0f64;
                    let mut weighted: Option<ValueId> = None;
                    for &idx in chunk {
                        let sample = &samples[idx];
                        let t = sample.target.texture_id as usize;
                        for g in [0, t] {
                            if reps[g].is_none() {
                                reps[g] =
                                    Some(enc_ref.encode_grid(&mut tape, &enc_bound, &grids[g])?);
                            }
                        }
                        let out = sample_loss(
                            &mut tape,
                            ar_ref,
                            &ar_bound,
                            reps[0].expect("texture 0 encoded above").values,
                            reps[t].expect("texture t encoded above").values,
                            s,
                            dim,
                            sample,
                            cfg,
                        )?;
                        pos_sum += out.mean_positive_logit as f64;
                        neg_sum += out.mean_negative_logit as f64;
                        let e = per_texture.entry(t as u32).or_insert((0.0, 0));
                        e.0 += tape.value(out.loss)[0] as f64;
                        e.1 += out.locations;
                        let scaled = tape.scale(out.loss, cfg.weights.weight_for(t as u32)?)?;
                        weighted = Some(match weighted {
                            None => scaled,
                            Some(acc) => tape.add(acc, scaled)?,
                        });
                    }
                    let total = weighted.expect("round-robin chunks are non-empty");
                    let weighted_value = tape.value(total)[0] as f64;
                    tape.backward(total)?;
                    let mut grads = Vec::new();
                    for (name, _) in enc_ref.params.entries() {
                        if let Some(g) = tape.grad(enc_bound.id(name)) {
                            grads.push((name.to_string(), g.to_vec()));
                        }
                    }
                    for (name, _) in ar_ref.params.entries() {
                        if let Some(g) = tape.grad(ar_bound.id(name)) {
                            grads.push((name.to_string(), g.to_vec()));
                        }
                    }
                    Ok(ThreadShare { grads, per_texture, pos_sum, neg_sum, weighted: weighted_value })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
    });
    // Surface a failure before touching any gradient state.
    let shares = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut per_texture: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut pos_sum = 0.0f64;
    let mut neg_sum = 0.0f64;
    let mut combined = 0.0f64;
    for share in &shares {
        for (name, g) in &share.grads {
            let store =
                if name.starts_with("enc.") { &mut encoder.params } else { &mut ar.params };
            store.get_mut(name).accumulate_grad(g);
        }
        for (&t, &(sum, n)) in &share.per_texture {
            let e = per_texture.entry(t).or_insert((0.0, 0));
            e.0 += sum;
            e.1 += n;
        }
        pos_sum += share.pos_sum;
        neg_sum += share.neg_sum;
        combined += share.weighted;
    }
    sgd.step(&mut [&mut encoder.params, &mut ar.params]);

    let per_texture_loss =
        per_texture.iter().map(|(&t, &(sum, n))| (t, (sum / n as f64) as f32)).collect();
    MetricsRecord {
        step,
        epoch,
        per_texture_loss,
        combined_loss: combined as f32,
        mean_positive_logit: (pos_sum / samples.len() as f64) as f32,
        mean_negative_logit: (neg_sum / samples.len() as f64) as f32,
        wall_time_ms: start.elapsed().as_millis() as u64,
    }
    .validated()
}

/// On failure mid-training, save the current parameters and a context file
/// so the run can be inspected; the original error passes through.
fn dump_divergence(
    cfg: &PretrainConfig,
    encoder: &Encoder,
    ar: &Autoregressor,
    step: u64,
    epoch: usize,
    img_idx: usize,
    err: Error,
) -> Error {
    let Some(dir) = &cfg.diagnostics_dir else { return err };
    let context = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "image_index": img_idx,
        "error": err.to_string(),
    })
    .to_string();
    let _ = std::fs::create_dir_all(dir);
    let _ = save_checkpoint(
        &dir.join("diverged.scpc"),
        &context,
        encoder.params.entries().chain(ar.params.entries()),
    );
    let _ = std::fs::write(dir.join("diverged.json"), context);
    err
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub grid: GridSpec,
    pub classes: usize,
    pub optimizer: SgdConfig,
    /// Frozen: full-batch steps over cached representations. Unfrozen:
    /// passes over the dataset with one step per image.
    pub epochs: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classifier needs >= 2 classes, got {}", self.classes)));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug)]
pub struct FinetuneResult {
    pub encoder: Encoder,
    pub head: LinearHead,
    pub train_accuracy: f32,
    /// Mean cross-entropy per step (frozen) or per epoch (unfrozen).
    pub losses: Vec<f32>,
}

/// Train a linear head on image representations, optionally unfreezing the
/// encoder. A probe is a finetune with `freeze_encoder = true`.
pub fn finetune(
    dataset: &[(Image, u32)],
    mut encoder: Encoder,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("finetuning needs at least one labeled image".to_string()));
    }
    if let Some((_, label)) = dataset.iter().find(|(_, l)| *l as usize >= cfg.classes) {
        return Err(Error::Config(format!("label {label} out of range for {} classes", cfg.classes)));
    }
    let mut init_rng = stream_rng(cfg.seed, stream::INIT);
    let mut head =
        LinearHead::new(HeadConfig { in_dim: encoder.cfg.dim, classes: cfg.classes }, &mut init_rng)?;
    let labels: Vec<usize> = dataset.iter().map(|(_, l)| *l as usize).collect();

    let losses = if cfg.freeze_encoder {
        let raw = representation_matrix(&encoder, dataset.iter().map(|(img, _)| img), cfg.grid)?;
        let (reps, mean, scale) = standardize(&raw)?;
        let losses = fit_head(&mut head, &reps, &labels, cfg.optimizer, cfg.epochs)?;
        fold_standardization(&mut head, &mean, scale);
        losses
    } else {
        let mut sgd = Sgd::new(cfg.optimizer)?;
        let mut order_rng = stream_rng(cfg.seed, stream::DATA_ORDER);
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut order_rng);
            let mut sum = 0.0f64;
            for &idx in &order {
                let (image, _) = &dataset[idx];
                let mut tape = Tape::new();
                let enc_bound = encoder.params.bind(&mut tape);
                let head_bound = head.params.bind(&mut tape);
                let rep = image_representation(&mut tape, &encoder, &enc_bound, image, cfg.grid)?;
                let logits = head.logits(&mut tape, &head_bound, rep)?;
                let ce = tape.cross_entropy_rows(logits, &labels[idx..idx + 1])?;
                let loss = tape.sum(ce)?;
                sum += tape.value(loss)[0] as f64;
                tape.backward(loss)?;
                encoder.params.absorb_grads(&tape, &enc_bound);
                head.params.absorb_grads(&tape, &head_bound);
                sgd.step(&mut [&mut encoder.params, &mut head.params]);
            }
            losses.push((sum / dataset.len() as f64) as f32);
        }
        losses
    };

    let train_accuracy = evaluate(&encoder, &head, dataset, cfg.grid)?;
    Ok(FinetuneResult { encoder, head, train_accuracy, losses })
}

/// Center rows by the column mean and scale by the RMS per-dim deviation.
/// Pooled representations share a large common component that dominates the
/// curvature and stalls a plain head fit; removing it conditions the probe.
fn standardize(reps: &Tensor) -> Result<(Tensor, Vec<f32>, f32)> {
    let (n, d) = (reps.shape()[0], reps.shape()[1]);
    let data = reps.data();
    let mut mean = vec![0.0f32; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f32;
    }
    let var: f64 = data
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| ((v - m) * (v - m)) as f64))
        .sum();
    let scale = ((var / (n * d) as f64).sqrt() as f32).max(1e-6);
    let standardized: Vec<f32> = data
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) / scale))
        .collect();
    Ok((Tensor::new(vec![n, d], standardized)?, mean, scale))
}

/// Rewrite `head` so applying it to raw rows equals applying the fitted head
/// to standardized rows: W' = W/scale, b' = b - mean . W'.
fn fold_standardization(head: &mut LinearHead, mean: &[f32], scale: f32) {
    let (d, c) = (head.cfg.in_dim, head.cfg.classes);
    let w = head.params.get_mut("head.weight").data_mut();
    for v in w.iter_mut() {
        *v /= scale;
    }
    let shift: Vec<f32> = (0..c)
        .map(|j| (0..d).map(|k| mean[k] * w[k * c + j]).sum())
        .collect();
    let b = head.params.get_mut("head.bias").data_mut();
    for (bj, s) in b.iter_mut().zip(shift) {
        *bj -= s;
    }
}

/// Full-batch SGD of a linear head on fixed representations `[n x d]`.
/// Returns the mean cross-entropy before each step.
pub fn fit_head(
    head: &mut LinearHead,
    reps: &Tensor,
    labels: &[usize],
    optimizer: SgdConfig,
    steps: usize,
) -> Result<Vec<f32>> {
    let n = labels.len();
    if reps.shape() != [n, head.cfg.in_dim] {
        return Err(Error::shape(
            "fit_head",
            format!("{:?} representations for {n} labels of dim {}", reps.shape(), head.cfg.in_dim),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.cfg.classes) {
        return Err(Error::Config(format!("label {bad} out of range for {} classes", head.cfg.classes)));
    }
    let mut sgd = Sgd::new(optimizer)?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = head.params.bind(&mut tape);
        let x = tape.input(reps.shape().to_vec(), reps.data().to_vec())?;
        let logits = head.logits(&mut tape, &bound, x)?;
        let ce = tape.cross_entropy_rows(logits, labels)?;
        let sum = tape.sum(ce)?;
        let loss = tape.scale(sum, 1.0 / n as f32)?;
        losses.push(tape.value(loss)[0]);
        tape.backward(loss)?;
        head.params.absorb_grads(&tape, &bound);
        sgd.step(&mut [&mut head.params]);
    }
    Ok(losses)
}

/// Encode `image` (resizing if needed) and mean-pool the grid rows into a
/// single `[1 x d]` representation.
fn image_representation(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &Bound,
    image: &Image,
    grid: GridSpec,
) -> Result<ValueId> {
    let side = grid.image_side;
    let resized;
    let image = if image.height() == side && image.width() == side {
        image
    } else {
        resized = resize(image, side)?;
        &resized
    };
    let patches = extract_grid(image, grid, 0)?;
    let reps = encoder.encode_grid(tape, bound, &patches)?;
    let pooled = tape.mean_rows(reps.values)?;
    tape.reshape(pooled, vec![1, encoder.cfg.dim])
}

/// Stack per-image representations into an untracked `[n x d]` tensor.
pub fn representation_matrix<'a>(
    encoder: &Encoder,
    images: impl Iterator<Item = &'a Image>,
    grid: GridSpec,
) -> Result<Tensor> {
    let d = encoder.cfg.dim;
    let mut data = Vec::new();
    let mut n = 0;
    for image in images {
        let mut tape = Tape::new();
        let bound = encoder.params.bind(&mut tape);
        let rep = image_representation(&mut tape, encoder, &bound, image, grid)?;
        data.extend_from_slice(tape.value(rep));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("representation_matrix needs at least one image".to_string()));
    }
    Tensor::new(vec![n, d], data)
}

/// Fraction of images whose argmax logit matches the label.
pub fn evaluate(
    encoder: &Encoder,
    head: &LinearHead,
    dataset: &[(Image, u32)],
    grid: GridSpec,
) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation needs at least one labeled image".to_string()));
    }
    let reps = representation_matrix(encoder, dataset.iter().map(|(img, _)| img), grid)?;
    let mut tape = Tape::new();
    let bound = head.params.bind(&mut tape);
    let x = tape.input(reps.shape().to_vec(), reps.data().to_vec())?;
    let logits = head.logits(&mut tape, &bound, x)?;
    let v = tape.value(logits);
    let c = head.cfg.classes;
    let correct = dataset
        .iter()
        .enumerate()
        .filter(|(i, (_, label))| {
            let row = &v[i * c..(i + 1) * c];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap();
            argmax == *label as usize
        })
        .count();
    Ok(correct as f32 / dataset.len() as f32)
}

/// Mean cosine similarity between each patch representation and its textured
/// counterpart, averaged over all grid cells, bank textures, and images.
/// Representations are L2-normalized, so the row dot product is the cosine.
pub fn texture_similarity(
    encoder: &Encoder,
    images: &[Image],
    bank: &[TextureTransform],
    grid: GridSpec,
) -> Result<f32> {
    if images.is_empty() || bank.is_empty() {
        return Err(Error::Config("texture_similarity needs images and a texture bank".to_string()));
    }
    let side = grid.image_side;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for image in images {
        let resized;
        let image = if image.height() == side && image.width() == side {
            image
        } else {
            resized = resize(image, side)?;
            &resized
        };
        let variants = make_variants(image, bank)?;
        let mut tape = Tape::new();
        let bound = encoder.params.bind(&mut tape);
        let mut mats = Vec::with_capacity(variants.len());
        for (t, v) in variants.iter().enumerate() {
            let patches = extract_grid(v, grid, t as u32)?;
            mats.push(encoder.encode_grid(&mut tape, &bound, &patches)?);
        }
        let base = tape.value(mats[0].values).to_vec();
        let d = encoder.cfg.dim;
        for rep in &mats[1..] {
            let v = tape.value(rep.values);
            for row in 0..rep.len {
                let dot: f32 = (0..d).map(|j| base[row * d + j] * v[row * d + j]).sum();
                total += dot as f64;
                count += 1;
            }
        }
    }
    Ok((total / count as f64) as f32)
}

/// Restore encoder and autoregressor weights from a checkpoint produced by
/// [`pretrain`] (via [`save_checkpoint`]).
pub fn load_pretrained(
    path: &Path,
    encoder: &mut Encoder,
    ar: Option<&mut Autoregressor>,
    expected_json: &str,
    force: bool,
) -> Result<()> {
    let ckpt = load_checkpoint_for(path, expected_json, force)?;
    encoder.params.load(&ckpt.params)?;
    if let Some(ar) = ar {
        ar.params.load(&ckpt.params)?;
    }
    Ok(())
}
