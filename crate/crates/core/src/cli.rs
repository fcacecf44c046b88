//! Command-line entry point: corpus generation, the pretrain / finetune /
//! probe workflows, and the gridcheck / texcheck diagnostics.
//!
//! Exit codes: 0 on success, 2 for configuration and usage failures, 1 for
//! everything else. Errors print as a single `error: ...` line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;
use crate::imaging::{make_variants, read_imgf, read_png, write_png, GridSpec, Image};
use crate::models::Encoder;
use crate::rng::{stream, stream_rng};
use crate::sequencing::{build_sequences, enumerate_anchors, Direction};
use crate::synth::{read_corpus, write_corpus, CLASS_NAMES};
use crate::training::{
    finetune, load_pretrained, pretrain, save_checkpoint, FinetuneResult, MetricsWriter,
};
use crate::{Error, Result};

const RESOLVED_CONFIG: &str = "resolved_config.json";
/// Bump only with a documented change; gridcheck output is golden-filed.
const GRIDCHECK_FORMAT: u32 = 1;

#[derive(Parser)]
#[command(name = "scpc", version, about = "Shape-biased contrastive predictive coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled synthetic shapes corpus
    Gensynth(GensynthArgs),
    /// Contrastive pretraining over an image corpus
    Pretrain(PretrainArgs),
    /// Train a classifier head on a checkpoint (encoder frozen per config)
    Finetune(TuneArgs),
    /// Linear probe: finetune with the encoder always frozen
    Probe(TuneArgs),
    /// Dump the anchor/train/target grid geometry as stable text
    Gridcheck(GridcheckArgs),
    /// Write texture-variant PNGs of an image for visual inspection
    Texcheck(TexcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value by dotted key, e.g. pretrain.lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override for this command's config section
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, seed_key: Option<&str>) -> Result<FileConfig> {
        let mut cfg = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let (Some(seed), Some(key)) = (self.seed, seed_key) {
            cfg.apply_overrides(&[format!("{key}={seed}")])?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GensynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the images and manifest.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory containing manifest.csv
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint, metrics, and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSONL path, or "-" for stdout; default <out>/metrics.jsonl
    #[arg(long)]
    metrics: Option<String>,
    /// Worker threads for in-step sample parallelism (fallback: SCPC_THREADS)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory containing manifest.csv
    #[arg(long)]
    dataset: PathBuf,
    /// Pretrained checkpoint; omit for a random-init baseline
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Accept a checkpoint whose config digest does not match
    #[arg(long)]
    force: bool,
    /// Output directory for checkpoint, metrics, and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSONL path, or "-" for stdout; default <out>/metrics.jsonl
    #[arg(long)]
    metrics: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DirArg {
    Both,
    Forward,
    Backward,
}

#[derive(Args)]
struct GridcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Optional image to validate against the grid spec
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirArg,
    /// Directory for gridcheck.txt + resolved config; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TexcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Source image (.imgf or .png)
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the variant PNGs
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gensynth(a) => cmd_gensynth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_tune(a, false),
        Command::Probe(a) => cmd_tune(a, true),
        Command::Gridcheck(a) => cmd_gridcheck(a),
        Command::Texcheck(a) => cmd_texcheck(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::GridSpec(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Create the output directory and echo every effective config value into it.
fn prepare_out(dir: &Path, cfg: &FileConfig) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))?;
    write_text(&dir.join(RESOLVED_CONFIG), &cfg.resolved_json())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn metrics_writer(arg: Option<&str>, out: &Path) -> Result<MetricsWriter> {
    match arg {
        Some("-") => Ok(MetricsWriter::Stdout),
        Some(path) => MetricsWriter::file(Path::new(path)),
        None => MetricsWriter::file(&out.join("metrics.jsonl")),
    }
}

fn thread_override(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SCPC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("SCPC_THREADS value '{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::Config(format!("image file {} does not exist", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("imgf") => read_imgf(path),
        _ => read_png(path),
    }
}

fn cmd_gensynth(a: &GensynthArgs) -> Result<()> {
    let cfg = a.config.resolve(Some("synth.seed"))?;
    let synth = cfg.synth_config()?;
    prepare_out(&a.out, &cfg)?;
    let manifest = write_corpus(&a.out, &synth)?;
    println!(
        "wrote {} images ({} classes x {}) and {}",
        CLASS_NAMES.len() * synth.per_class,
        CLASS_NAMES.len(),
        synth.per_class,
        manifest.display()
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve(Some("pretrain.seed"))?;
    if let Some(threads) = thread_override(a.threads)? {
        cfg.apply_overrides(&[format!("pretrain.threads={threads}")])?;
    }
    let mut pcfg = cfg.pretrain_config()?;
    prepare_out(&a.out, &cfg)?;
    pcfg.diagnostics_dir = Some(a.out.clone());

    let images: Vec<Image> = read_corpus(&a.dataset)?.into_iter().map(|(img, _)| img).collect();
    let mut metrics = metrics_writer(a.metrics.as_deref(), &a.out)?;
    let result = pretrain(&images, &pcfg, &mut metrics)?;

    let ckpt = a.out.join("model.scpc");
    save_checkpoint(
        &ckpt,
        &cfg.model_identity(),
        result.encoder.params.entries().chain(result.autoregressor.params.entries()),
    )?;
    println!(
        "pretrain complete: {} steps, final epoch loss {:.6}, checkpoint {}",
        result.steps,
        result.epoch_losses.last().copied().unwrap_or(f32::NAN),
        ckpt.display()
    );
    Ok(())
}

fn cmd_tune(a: &TuneArgs, force_freeze: bool) -> Result<()> {
    let cfg = a.config.resolve(Some("finetune.seed"))?;
    let freeze = force_freeze || cfg.finetune.freeze_encoder;
    let fcfg = cfg.finetune_config(freeze)?;
    prepare_out(&a.out, &cfg)?;

    // The encoder starts exactly as pretraining would have left a virgin run,
    // so a no-checkpoint probe is the paired random-init baseline.
    let mut init_rng = stream_rng(cfg.pretrain.seed, stream::INIT);
    let mut encoder = Encoder::new(cfg.encoder_config(), &mut init_rng)?;
    if let Some(path) = &a.checkpoint {
        if !path.exists() {
            return Err(Error::Config(format!(
                "checkpoint file {} does not exist",
                path.display()
            )));
        }
        load_pretrained(path, &mut encoder, None, &cfg.model_identity(), a.force)?;
    }

    let dataset = read_corpus(&a.dataset)?;
    let result = finetune(&dataset, encoder, &fcfg)?;
    write_tune_artifacts(a, &cfg, freeze, &result)?;
    println!(
        "{} accuracy {:.4} over {} images",
        if freeze { "probe" } else { "finetune" },
        result.train_accuracy,
        dataset.len()
    );
    Ok(())
}

fn write_tune_artifacts(
    a: &TuneArgs,
    cfg: &FileConfig,
    freeze: bool,
    result: &FinetuneResult,
) -> Result<()> {
    let ckpt = a.out.join("model.scpc");
    save_checkpoint(
        &ckpt,
        &cfg.model_identity(),
        result.encoder.params.entries().chain(result.head.params.entries()),
    )?;
    let mut lines = String::new();
    for (step, loss) in result.losses.iter().enumerate() {
        lines.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
        lines.push('\n');
    }
    match a.metrics.as_deref() {
        Some("-") => print!("{lines}"),
        Some(path) => write_text(Path::new(path), &lines)?,
        None => write_text(&a.out.join("metrics.jsonl"), &lines)?,
    }
    let results = serde_json::json!({
        "train_accuracy": result.train_accuracy,
        "freeze_encoder": freeze,
        "epochs": cfg.finetune.epochs,
    });
    write_text(&a.out.join("results.json"), &(results.to_string() + "\n"))
}

fn cmd_gridcheck(a: &GridcheckArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let spec = cfg.grid_spec()?;
    if let Some(path) = &a.image {
        load_image(path)?;
    }
    let directions: &[Direction] = match a.direction {
        DirArg::Both => &Direction::BOTH,
        DirArg::Forward => &[Direction::Forward],
        DirArg::Backward => &[Direction::Backward],
    };
    let dump = gridcheck_dump(spec, cfg.pretrain.k, directions)?;
    match &a.out {
        Some(dir) => {
            prepare_out(dir, &cfg)?;
            let path = dir.join("gridcheck.txt");
            write_text(&path, &dump)?;
            println!("wrote {}", path.display());
        }
        None => print!("{dump}"),
    }
    Ok(())
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

fn coord_list(coords: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for &(i, j) in coords {
        out.push_str(&format!(" ({i},{j})"));
    }
    out
}

/// Byte-stable dump, one anchor per block. Covered by golden-file tests;
/// any change requires a GRIDCHECK_FORMAT bump.
pub fn gridcheck_dump(spec: GridSpec, k: usize, directions: &[Direction]) -> Result<String> {
    let s = spec.grid_side();
    let mut out = String::new();
    out.push_str(&format!("grid {s}x{s}\n"));
    out.push_str(&format!("format {GRIDCHECK_FORMAT}\n"));
    out.push_str(&format!(
        "spec image_side={} patch_side={} stride={} k={}\n",
        spec.image_side, spec.patch_side, spec.stride, k
    ));
    for &d in directions {
        let anchors = enumerate_anchors(s, k, d)?;
        out.push_str(&format!("direction {} anchors {}\n", dir_name(d), anchors.len()));
    }
    for &d in directions {
        for anchor in enumerate_anchors(s, k, d)? {
            let (train, target) = build_sequences(&anchor)?;
            out.push('\n');
            out.push_str(&format!(
                "anchor ({},{}) {}\n",
                anchor.anchor.0,
                anchor.anchor.1,
                dir_name(d)
            ));
            out.push_str(&format!("train{}\n", coord_list(&train.coords)));
            out.push_str(&format!("target{}\n", coord_list(&target.coords)));
        }
    }
    Ok(out)
}

fn cmd_texcheck(a: &TexcheckArgs) -> Result<()> {
    let cfg = a.config.resolve(None)?;
    let image = load_image(&a.image)?;
    prepare_out(&a.out, &cfg)?;
    let variants = make_variants(&image, &cfg.textures)?;
    for (i, v) in variants.iter().enumerate() {
        let path = a.out.join(format!("variant_{i}.png"));
        write_png(&path, v)?;
        let desc = if i == 0 {
            "original".to_string()
        } else {
            format!("{:?}", cfg.textures[i - 1].pattern)
        };
        println!("variant {i} {desc} -> {}", path.display());
    }
    Ok(())
}
