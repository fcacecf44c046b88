//! Images, overlapping patch grids, and procedural texture variants.

mod io;
mod texture;

pub use io::{read_imgf, read_png, write_imgf, write_png};
pub(crate) use texture::pattern_map;
pub use texture::{apply_texture, default_bank, make_variants, Pattern, TextureTransform};

use crate::{Error, Result};

/// RGB image with planar channel layout (`[3][height][width]`), values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image", format!("degenerate size {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(
                "image",
                format!("expected {} samples, got {}", Self::CHANNELS * height * width, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::shape("image", format!("sample {v} outside [0,1]")));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar samples: channel-major, then row-major within each channel.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rec. 601 luminance, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[plane + i] + 0.114 * self.data[2 * plane + i])
            .collect()
    }
}

/// Geometry of an overlapping patch grid: stride is always half the patch side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub stride: usize,
}

impl GridSpec {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 || patch_side % 2 != 0 {
            return Err(Error::GridSpec(format!("patch side {patch_side} must be positive and even")));
        }
        if image_side < patch_side {
            return Err(Error::GridSpec(format!(
                "image side {image_side} smaller than patch side {patch_side}"
            )));
        }
        let stride = patch_side / 2;
        if (image_side - patch_side) % stride != 0 {
            return Err(Error::GridSpec(format!(
                "image side {image_side} incompatible with patch {patch_side}, stride {stride}"
            )));
        }
        Ok(GridSpec { image_side, patch_side, stride })
    }

    pub fn grid_side(&self) -> usize {
        (self.image_side - self.patch_side) / self.stride + 1
    }
}

/// `grid_side × grid_side` overlapping patches cut from one image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    spec: GridSpec,
    /// Row-major over (i,j); each patch is planar `[3][p][p]`.
    patches: Vec<Vec<f32>>,
    source_texture_id: u32,
}

impl PatchGrid {
    /// Assemble a grid from already-cut patches (each planar `[3][p][p]`,
    /// row-major over cells). `extract_grid` is the checked path from images.
    pub fn from_patches(spec: GridSpec, patches: Vec<Vec<f32>>, source_texture_id: u32) -> Result<Self> {
        let s = spec.grid_side();
        if patches.len() != s * s {
            return Err(Error::GridSpec(format!("expected {} patches, got {}", s * s, patches.len())));
        }
        let want = Image::CHANNELS * spec.patch_side * spec.patch_side;
        if let Some(bad) = patches.iter().position(|p| p.len() != want) {
            return Err(Error::GridSpec(format!(
                "patch {bad} has {} samples, expected {want}",
                patches[bad].len()
            )));
        }
        Ok(PatchGrid { spec, patches, source_texture_id })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn grid_side(&self) -> usize {
        self.spec.grid_side()
    }

    pub fn source_texture_id(&self) -> u32 {
        self.source_texture_id
    }

    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        &self.patches[i * self.spec.grid_side() + j]
    }
}

/// Bilinear resize to `side × side` with corner-aligned sampling.
pub fn resize(img: &Image, side: usize) -> Result<Image> {
    if side == 0 {
        return Err(Error::shape("resize", "target side 0".to_string()));
    }
    let scale = |src: usize| -> f64 {
        if side > 1 {
            (src - 1) as f64 / (side - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(img.height), scale(img.width));
    let mut data = vec![0.0f32; Image::CHANNELS * side * side];
    for oy in 0..side {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..side {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..Image::CHANNELS {
                let top = img.get(c, y0, x0) * (1.0 - wx) + img.get(c, y0, x1) * wx;
                let bottom = img.get(c, y1, x0) * (1.0 - wx) + img.get(c, y1, x1) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                data[(c * side + oy) * side + ox] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(side, side, data)
}

/// Cut the overlapping patch grid out of a square image matching `spec`.
pub fn extract_grid(img: &Image, spec: GridSpec, source_texture_id: u32) -> Result<PatchGrid> {
    if img.height != spec.image_side || img.width != spec.image_side {
        return Err(Error::GridSpec(format!(
            "image {}x{} does not match spec side {}",
            img.height, img.width, spec.image_side
        )));
    }
    let s = spec.grid_side();
    let p = spec.patch_side;
    let mut patches = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let (y0, x0) = (i * spec.stride, j * spec.stride);
            let mut patch = Vec::with_capacity(Image::CHANNELS * p * p);
            for c in 0..Image::CHANNELS {
                for y in 0..p {
                    let row = (c * img.height + y0 + y) * img.width + x0;
                    patch.extend_from_slice(&img.data[row..row + p]);
                }
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid { spec, patches, source_texture_id })
}
