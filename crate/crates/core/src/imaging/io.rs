//! Image IO: PNG for viewing, and the raw IMGF fixture format.
//!
//! IMGF layout: magic `IMGF`, then u16 height, width, channels, reserved
//! (little-endian), then `h*w*c` f32 samples interleaved row-major (y, x, c).

use std::fs;
use std::path::Path;

use super::Image;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"IMGF";

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

pub fn write_imgf(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(format_err(path, format!("image {h}x{w} exceeds IMGF u16 extents")));
    }
    let mut bytes = Vec::with_capacity(12 + img.data().len() * 4);
    bytes.extend_from_slice(MAGIC);
    for v in [h as u16, w as u16, Image::CHANNELS as u16, 0u16] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..Image::CHANNELS {
                bytes.extend_from_slice(&img.get(c, y, x).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_imgf(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 12 {
        return Err(format_err(path, format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, "bad magic, expected IMGF"));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let (h, w, c) = (field(0), field(1), field(2));
    if c != Image::CHANNELS {
        return Err(format_err(path, format!("expected {} channels, got {c}", Image::CHANNELS)));
    }
    let expected = 12 + h * w * c * 4;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes, got {}", bytes.len())));
    }
    let mut data = vec![0.0f32; c * h * w];
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                data[(ch * h + y) * w + x] = v;
                off += 4;
            }
        }
    }
    Image::new(h, w, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..Image::CHANNELS {
            px.0[c] = (img.get(c, y as usize, x as usize) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| format_err(path, format!("png encode: {e}")))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| format_err(path, format!("png decode: {e}")))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; Image::CHANNELS * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..Image::CHANNELS {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data).map_err(|e| format_err(path, e.to_string()))
}
