//! Procedural shape corpus: four shape classes rendered over gently graded
//! backgrounds. Class identity lives in geometry alone — every class draws
//! its foreground area, fill, and placement from the same distributions, so
//! intensity statistics carry no label signal. With texture randomization
//! on, foreground and background are filled with distinct patterns from the
//! texture vocabulary, making shape the only label-predictive cue.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{pattern_map, read_imgf, write_imgf, Image, Pattern};
use crate::rng::{stream, stream_rng};

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const MANIFEST: &str = "manifest.csv";

/// Minimum luminance gap between foreground and background colors.
const MIN_CONTRAST: f32 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    /// Fill fg/bg with distinct procedural patterns instead of flat color.
    pub randomize_textures: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { per_class: 16, side: 64, seed: 7, randomize_textures: true }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be >= 1".to_string()));
        }
        if self.side < 16 {
            return Err(Error::Config(format!("side {} too small to render shapes", self.side)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { r: f32 },
    Square { half: f32 },
    Triangle { base: f32 },
    Cross { arm: f32, len: f32 },
}

impl Shape {
    /// Derive the size parameter from a target area so every class shares
    /// one area distribution.
    fn with_area(class: usize, area: f32) -> Shape {
        match class {
            0 => Shape::Circle { r: (area / std::f32::consts::PI).sqrt() },
            1 => Shape::Square { half: area.sqrt() / 2.0 },
            // isoceles with height = 0.9 * base: area = 0.45 b^2
            2 => Shape::Triangle { base: (area / 0.45).sqrt() },
            // two bars, length = 4 * arm width: area = 2wl - w^2 = 7 w^2
            _ => Shape::Cross { arm: (area / 7.0).sqrt(), len: 4.0 * (area / 7.0).sqrt() },
        }
    }

    /// Half-extent of the bounding box, for placement margins.
    fn reach(&self) -> f32 {
        match *self {
            Shape::Circle { r } => r,
            Shape::Square { half } => half * std::f32::consts::SQRT_2,
            Shape::Triangle { base } => base * 0.9,
            Shape::Cross { len, .. } => len / 2.0 * std::f32::consts::SQRT_2,
        }
    }

    /// Point-in-shape test in shape-local (rotated, centered) coordinates.
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Circle { r } => x * x + y * y <= r * r,
            Shape::Square { half } => x.abs() <= half && y.abs() <= half,
            Shape::Triangle { base } => {
                let h = 0.9 * base;
                // apex at (0, -h/2), base corners at (+-b/2, +h/2)
                if y < -h / 2.0 || y > h / 2.0 {
                    return false;
                }
                let width_at_y = base * (y + h / 2.0) / h;
                x.abs() * 2.0 <= width_at_y
            }
            Shape::Cross { arm, len } => {
                let (w, l) = (arm / 2.0, len / 2.0);
                (x.abs() <= w && y.abs() <= l) || (x.abs() <= l && y.abs() <= w)
            }
        }
    }
}

struct Fill {
    color: [f32; 3],
    /// Zero-mean pattern modulation: (pattern, amplitude).
    pattern: Option<(Pattern, f32)>,
}

struct Scene {
    shape: Shape,
    center: (f32, f32),
    rotation: (f32, f32), // (cos, sin)
    fg: Fill,
    bg: Fill,
    grad_dir: (f32, f32),
    grad_amp: f32,
}

fn luma(c: &[f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let target: f32 = rng.random_range(0.3..0.7);
    let mut c = [0.0f32; 3];
    for v in &mut c {
        *v = (target + rng.random_range(-0.25f32..0.25)).clamp(0.0, 1.0);
    }
    c
}

/// The pattern vocabulary for randomized fills. Indices are drawn uniformly;
/// noise re-seeds per draw so repeats still differ.
fn sample_pattern(rng: &mut ChaCha8Rng) -> (usize, Pattern) {
    let idx = rng.random_range(0..5usize);
    let pattern = match idx {
        0 => Pattern::DiagonalStripes { period: 8 },
        1 => Pattern::Checker { cell: 6 },
        2 => Pattern::Dots { radius: 2.0, pitch: 8 },
        3 => Pattern::Noise { amplitude: 1.0, seed: rng.random() },
        _ => Pattern::CrossHatch { period: 6 },
    };
    (idx, pattern)
}

fn sample_scene(class: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let s = cfg.side as f32;
    let area = rng.random_range(0.08..0.35) * s * s;
    let shape = Shape::with_area(class, area);
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let margin = (shape.reach() + 1.0).min(s / 2.0 - 1.0);
    let center = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
    let bg_color = sample_color(rng);
    let fg_color = loop {
        let fg = sample_color(rng);
        if (luma(&fg) - luma(&bg_color)).abs() >= MIN_CONTRAST {
            break fg;
        }
    };
    let (fg, bg) = if cfg.randomize_textures {
        let (bg_idx, bg_pattern) = sample_pattern(rng);
        let bg_amp = rng.random_range(0.15..0.4);
        let fg_pattern = loop {
            let (idx, pattern) = sample_pattern(rng);
            if idx != bg_idx {
                break pattern;
            }
        };
        let fg_amp = rng.random_range(0.15..0.4);
        (
            Fill { color: fg_color, pattern: Some((fg_pattern, fg_amp)) },
            Fill { color: bg_color, pattern: Some((bg_pattern, bg_amp)) },
        )
    } else {
        (Fill { color: fg_color, pattern: None }, Fill { color: bg_color, pattern: None })
    };
    let grad_theta = rng.random_range(0.0..std::f32::consts::TAU);
    Scene {
        shape,
        center,
        rotation: (theta.cos(), theta.sin()),
        fg,
        bg,
        grad_dir: (grad_theta.cos(), grad_theta.sin()),
        grad_amp: rng.random_range(0.0..0.08),
    }
}

/// Per-pixel zero-mean modulation for a fill, if it has a pattern.
fn modulation(fill: &Fill, side: usize) -> Option<Vec<f32>> {
    fill.pattern.map(|(pattern, amp)| {
        let mut map = pattern_map(pattern, side, side);
        map.iter_mut().for_each(|v| *v = amp * (*v - 0.5));
        map
    })
}

fn render(scene: &Scene, side: usize) -> Image {
    let s = side as f32;
    let (cx, cy) = scene.center;
    let (cos_t, sin_t) = scene.rotation;
    let fg_mod = modulation(&scene.fg, side);
    let bg_mod = modulation(&scene.bg, side);
    let mut data = vec![0.0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            // Hard pixel-center membership. Soft (supersampled) edges mix
            // fg/bg into intermediate bins whose mass tracks the shape's
            // perimeter, leaking class into the luminance histogram.
            let px = x as f32 + 0.5 - cx;
            let py = y as f32 + 0.5 - cy;
            let rx = cos_t * px + sin_t * py;
            let ry = -sin_t * px + cos_t * py;
            let inside = scene.shape.contains(rx, ry);
            let i = y * side + x;
            let t = ((x as f32 * scene.grad_dir.0 + y as f32 * scene.grad_dir.1) / s - 0.5)
                * scene.grad_amp;
            let fg_m = fg_mod.as_ref().map_or(0.0, |m| m[i]);
            let bg_m = bg_mod.as_ref().map_or(0.0, |m| m[i]);
            for c in 0..3 {
                let v = if inside {
                    scene.fg.color[c] + fg_m
                } else {
                    scene.bg.color[c] + t + bg_m
                };
                data[c * side * side + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(side, side, data).expect("rendered samples are in range")
}

/// Deterministic labeled corpus: classes interleaved round-robin, labels in
/// `0..4` following [`CLASS_NAMES`].
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(Image, u32)>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, stream::SYNTH);
    let mut out = Vec::with_capacity(cfg.per_class * CLASS_NAMES.len());
    for _ in 0..cfg.per_class {
        for class in 0..CLASS_NAMES.len() {
            let scene = sample_scene(class, cfg, &mut rng);
            out.push((render(&scene, cfg.side), class as u32));
        }
    }
    Ok(out)
}

/// Write the corpus as IMGF files plus a `manifest.csv` of `path,label`
/// rows. Returns the manifest path.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    let corpus = generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = String::from("path,label\n");
    for (i, (img, label)) in corpus.iter().enumerate() {
        let name = format!("img_{i:04}_{}.imgf", CLASS_NAMES[*label as usize]);
        write_imgf(&dir.join(&name), img)?;
        manifest.push_str(&format!("{name},{label}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

/// Read a corpus back from its directory via the manifest.
pub fn read_corpus(dir: &Path) -> Result<Vec<(Image, u32)>> {
    let path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "path,label" {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("manifest header {header:?}, expected \"path,label\""),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.rsplit_once(',').ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: no comma in {line:?}", lineno + 2),
        })?;
        let label: u32 = label.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: bad label {label:?}", lineno + 2),
        })?;
        out.push((read_imgf(&dir.join(name))?, label));
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "manifest lists no images".to_string(),
        });
    }
    Ok(out)
}
