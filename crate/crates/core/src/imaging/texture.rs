//! Procedural texture transforms: deterministic, edge-preserving substitutes
//! for neural style transfer. Each transform overwrites local texture with a
//! synthetic pattern while re-injecting the source's high-pass luminance so
//! shape edges survive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::rng::{stream_rng, stream};
use crate::{Error, Result};

/// Gain on the high-pass luminance added to the pattern before blending.
const EDGE_GAIN: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    DiagonalStripes { period: usize },
    Checker { cell: usize },
    Dots { radius: f32, pitch: usize },
    Noise { amplitude: f32, seed: u64 },
    CrossHatch { period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureTransform {
    pub texture_id: u32,
    pub pattern: Pattern,
    pub blend: f32,
}

/// The five default transforms, ids 1..=5.
pub fn default_bank() -> Vec<TextureTransform> {
    let patterns = [
        Pattern::DiagonalStripes { period: 8 },
        Pattern::Checker { cell: 8 },
        Pattern::Dots { radius: 2.0, pitch: 8 },
        Pattern::Noise { amplitude: 0.4, seed: 4 },
        Pattern::CrossHatch { period: 6 },
    ];
    patterns
        .iter()
        .enumerate()
        .map(|(i, &pattern)| TextureTransform { texture_id: i as u32 + 1, pattern, blend: 0.6 })
        .collect()
}

pub(crate) fn pattern_map(pattern: Pattern, height: usize, width: usize) -> Vec<f32> {
    let mut map = vec![0.0f32; height * width];
    match pattern {
        Pattern::DiagonalStripes { period } => {
            for y in 0..height {
                for x in 0..width {
                    map[y * width + x] = if (x + y) % period < period / 2 { 1.0 } else { 0.0 };
                }
            }
        }
        Pattern::Checker { cell } => {
            for y in 0..height {
                for x in 0..width {
                    map[y * width + x] = ((y / cell + x / cell) % 2) as f32;
                }
            }
        }
        Pattern::Dots { radius, pitch } => {
            let half = pitch as f32 / 2.0;
            for y in 0..height {
                for x in 0..width {
                    let dx = (x % pitch) as f32 + 0.5 - half;
                    let dy = (y % pitch) as f32 + 0.5 - half;
                    map[y * width + x] = if dx * dx + dy * dy <= radius * radius { 1.0 } else { 0.0 };
                }
            }
        }
        Pattern::Noise { amplitude, seed } => {
            let mut rng = stream_rng(seed, stream::TEXTURES);
            for v in map.iter_mut() {
                *v = 0.5 + amplitude * rng.random_range(-1.0..1.0);
            }
        }
        Pattern::CrossHatch { period } => {
            let p = period as i64;
            for y in 0..height {
                for x in 0..width {
                    let down = (x + y) % period < 2;
                    let up = (x as i64 - y as i64).rem_euclid(p) < 2;
                    map[y * width + x] = if down || up { 0.0 } else { 1.0 };
                }
            }
        }
    }
    map
}

/// 3x3 box blur with clamped edges. Summation pairs mirror-symmetric taps
/// first so the result commutes bitwise with horizontal flips.
fn box_blur(src: &[f32], height: usize, width: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        src[y * width + x]
    };
    let mut out = vec![0.0f32; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let row = |dy: isize| (at(y + dy, x - 1) + at(y + dy, x + 1)) + at(y + dy, x);
            out[y as usize * width + x as usize] = ((row(-1) + row(1)) + row(0)) / 9.0;
        }
    }
    out
}

pub fn apply_texture(img: &Image, t: &TextureTransform) -> Result<Image> {
    if t.texture_id == 0 {
        return Err(Error::UnknownTexture(0));
    }
    if !(0.0..=1.0).contains(&t.blend) {
        return Err(Error::Config(format!("blend weight {} outside [0,1]", t.blend)));
    }
    let (h, w) = (img.height(), img.width());
    let luma = img.luminance();
    let blurred = box_blur(&luma, h, w);
    let pattern = pattern_map(t.pattern, h, w);
    let plane = h * w;
    let mut data = vec![0.0f32; Image::CHANNELS * plane];
    for i in 0..plane {
        let high = luma[i] - blurred[i];
        let textured = (pattern[i] + EDGE_GAIN * high).clamp(0.0, 1.0);
        for c in 0..Image::CHANNELS {
            let v = (1.0 - t.blend) * img.data()[c * plane + i] + t.blend * textured;
            data[c * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, data)
}

/// Original image followed by one variant per bank entry.
pub fn make_variants(img: &Image, bank: &[TextureTransform]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(bank.len() + 1);
    out.push(img.clone());
    for t in bank {
        out.push(apply_texture(img, t)?);
    }
    Ok(out)
}
