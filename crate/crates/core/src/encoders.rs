//! Vision-language encoder and captioner boundaries, with asset-free
//! stand-ins.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ink_thumbnail;
use crate::util::{gaussian, normalize_in_place, stable_hash};

/// Side of the thumbnail the mock image encoder flattens.
pub const MOCK_THUMB: u32 = 16;
pub const MOCK_EMBED_DIM: usize = 512;
pub const MOCK_PROJECTION_SEED: u64 = 7;
/// Pixels per patch side for mock visual tokens.
pub const MOCK_PATCH_PIXELS: u32 = 4;

/// Class token plus a square grid of patch tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub cls: Vec<f32>,
    pub patches: Vec<f32>,
    pub grid: usize,
    pub dim: usize,
}

pub trait ClipEncoder: Send + Sync {
    /// Width of `embed_image` / `embed_text` outputs.
    fn embed_dim(&self) -> usize;
    /// Width of visual tokens.
    fn token_dim(&self) -> usize;
    fn patch_grid(&self) -> usize;
    /// Unit-length image embedding.
    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>>;
    /// Unit-length text embedding.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn visual_tokens(&self, img: &RgbImage) -> Result<VisualTokens>;
}

/// Resolves an encoder key. Only `"mock"` is available without model assets.
pub fn open_clip(key: &str, token_dim: usize, patch_grid: usize) -> Result<Box<dyn ClipEncoder>> {
    match key {
        "mock" => Ok(Box::new(MockClip::new(token_dim, patch_grid))),
        other => Err(Error::EncoderUnavailable(format!(
            "no weights for encoder {other:?}; use \"mock\""
        ))),
    }
}

/// Deterministic stand-in: images are flattened ink thumbnails projected by a
/// fixed Gaussian matrix; text rows are hash-seeded Gaussians.
pub struct MockClip {
    projection: Vec<f32>,
    patch_projection: Vec<f32>,
    token_dim: usize,
    patch_grid: usize,
}

impl MockClip {
    pub fn new(token_dim: usize, patch_grid: usize) -> Self {
        let inputs = (MOCK_THUMB * MOCK_THUMB) as usize;
        let patch_inputs = (MOCK_PATCH_PIXELS * MOCK_PATCH_PIXELS) as usize;
        Self {
            projection: gaussian(
                MOCK_PROJECTION_SEED,
                inputs * MOCK_EMBED_DIM,
                1.0 / (inputs as f32).sqrt(),
            ),
            patch_projection: gaussian(
                stable_hash(&[b"mock-clip-patch"]),
                patch_inputs * token_dim,
                1.0 / (patch_inputs as f32).sqrt(),
            ),
            token_dim,
            patch_grid,
        }
    }

    /// Projection matrix, row-major `(inputs, MOCK_EMBED_DIM)`.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }
}

fn project(x: &[f32], matrix: &[f32], out_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &matrix[i * out_dim..(i + 1) * out_dim];
        for (o, &m) in out.iter_mut().zip(row) {
            *o += xi * m;
        }
    }
    out
}

/// Unit vector, or the first basis vector when `v` is all zeros (blank image).
fn unit_or_basis(mut v: Vec<f32>) -> Vec<f32> {
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    normalize_in_place(&mut v);
    v
}

impl ClipEncoder for MockClip {
    fn embed_dim(&self) -> usize {
        MOCK_EMBED_DIM
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn patch_grid(&self) -> usize {
        self.patch_grid
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let x = ink_thumbnail(img, MOCK_THUMB);
        Ok(unit_or_basis(project(&x, &self.projection, MOCK_EMBED_DIM)))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let seed = stable_hash(&[b"mock-clip-text", text.as_bytes()]);
        Ok(unit_or_basis(gaussian(seed, MOCK_EMBED_DIM, 1.0)))
    }

    fn visual_tokens(&self, img: &RgbImage) -> Result<VisualTokens> {
        let (p, k) = (self.patch_grid as u32, MOCK_PATCH_PIXELS);
        let side = p * k;
        let ink = ink_thumbnail(img, side);
        let mut pre = Vec::with_capacity(self.patch_grid * self.patch_grid * self.token_dim);
        let mut patch = Vec::with_capacity((k * k) as usize);
        for py in 0..p {
            for px in 0..p {
                patch.clear();
                for y in 0..k {
                    let row = ((py * k + y) * side + px * k) as usize;
                    patch.extend_from_slice(&ink[row..row + k as usize]);
                }
                pre.extend(project(&patch, &self.patch_projection, self.token_dim));
            }
        }
        let count = (p * p) as f32;
        let mut cls = vec![0.0f32; self.token_dim];
        for chunk in pre.chunks_exact(self.token_dim) {
            for (c, v) in cls.iter_mut().zip(chunk) {
                *c += v / count;
            }
        }
        Ok(VisualTokens {
            cls: cls.into_iter().map(f32::tanh).collect(),
            patches: pre.into_iter().map(f32::tanh).collect(),
            grid: self.patch_grid,
            dim: self.token_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Render,
}

impl Modality {
    pub fn caption_prefix(self) -> &'static str {
        match self {
            Modality::Sketch => "a sketch of",
            Modality::Render => "a 3D rendering of",
        }
    }
}

pub trait Captioner: Send + Sync {
    /// Completes the modality prefix into a caption. `hint` is the category
    /// name when the caller knows it.
    fn caption(&self, img: &RgbImage, modality: Modality, hint: Option<&str>) -> Result<String>;
}

/// Prefix plus the category hint, verbatim.
pub struct StubCaptioner;

impl Captioner for StubCaptioner {
    fn caption(&self, _img: &RgbImage, modality: Modality, hint: Option<&str>) -> Result<String> {
        Ok(match hint {
            Some(h) if !h.is_empty() => format!("{} {}", modality.caption_prefix(), h),
            _ => modality.caption_prefix().to_string(),
        })
    }
}

pub fn open_captioner(key: &str) -> Result<Box<dyn Captioner>> {
    match key {
        "stub" => Ok(Box::new(StubCaptioner)),
        other => Err(Error::CaptionerUnavailable(format!(
            "no weights for captioner {other:?}; use \"stub\""
        ))),
    }
}
