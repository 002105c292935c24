//! Procedural six-category corpus for smoke tests and demos.
//!
//! Every shape is a surface of revolution whose profile family defines the
//! category; sketches are edge tracings of a jittered render. The two held-out
//! families have at most five shapes so the few-shapes split rule marks them unseen.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng;

use crate::dataset::render::render_view;
use crate::dataset::{
    apply_split, load_manifest, make_split_with, CameraRig, DatasetManifest, DatasetName, Mesh, Projection,
    SplitOptions, SplitProtocol, SplitSpec,
};
use crate::encoders::{Captioner, ClipEncoder};
use crate::error::{Error, Result};
use crate::pipeline::{caption_all, render_all, select_all};
use crate::util::{rng, stable_hash};

pub const DATASET_DIR: &str = "synthetic";
pub const SEEN: [&str; 4] = ["cone", "hourglass", "mushroom", "vase"];
pub const UNSEEN: [&str; 2] = ["disk", "pillar"];

/// How a sketch is drawn from its source render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchStyle {
    /// Edge strokes only.
    Outline,
    /// Edge strokes over a flat grey fill of the silhouette.
    Filled,
    /// Edge strokes over the render's shading posterized to four tones.
    Shaded,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub style: SketchStyle,
    pub seen_shapes: usize,
    pub unseen_shapes: usize,
    pub sketches_per_category: usize,
    pub image_size: u32,
    pub views: usize,
    pub elevation_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            style: SketchStyle::Shaded,
            seen_shapes: 8,
            unseen_shapes: 4,
            sketches_per_category: 6,
            image_size: 64,
            views: 6,
            elevation_deg: 20.0,
            seed: 0,
        }
    }
}

const SEGMENTS: usize = 24;
const SAMPLES: usize = 12;

/// Radius profile `(height, radius)` of a category, with `j` in roughly [0.9, 1.1] as jitter.
pub fn profile(category: &str, j: f32) -> Result<Vec<(f32, f32)>> {
    let ts = (0..=SAMPLES).map(|i| i as f32 / SAMPLES as f32);
    let p: Vec<(f32, f32)> = match category {
        "cone" => ts.map(|t| (2.0 * t * j, (1.0 - t) * 0.9 + 0.02)).collect(),
        "hourglass" => ts.map(|t| (2.0 * t, 0.15 + 0.7 * j * (2.0 * t - 1.0).abs())).collect(),
        "mushroom" => ts
            .map(|t| {
                if t < 0.55 {
                    (1.6 * t, 0.18 * j)
                } else {
                    let u = (t - 0.55) / 0.45;
                    (0.88 + 0.5 * u, j * (1.0 - u * u).max(0.0).sqrt() + 0.02)
                }
            })
            .collect(),
        "vase" => ts
            .map(|t| (2.2 * t, 0.25 + 0.4 * j * (std::f32::consts::PI * t).sin() - 0.1 * t))
            .collect(),
        "disk" => ts.map(|t| (0.25 * t * j, 1.0)).collect(),
        "pillar" => ts.map(|t| (3.2 * t * j, 0.3)).collect(),
        other => return Err(Error::InvalidArgument(format!("unknown synthetic category {other}"))),
    };
    Ok(p)
}

pub fn shape_mesh(category: &str, j: f32) -> Result<Mesh> {
    Mesh::revolve(&profile(category, j)?, SEGMENTS)
}

/// Dark where neighbouring pixels differ sharply, white elsewhere; strokes widen with size.
pub fn trace_edges(render: &GrayImage) -> GrayImage {
    let (w, h) = render.dimensions();
    let at = |x: i64, y: i64| -> i32 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            255
        } else {
            render.get_pixel(x as u32, y as u32).0[0] as i32
        }
    };
    let mut edges = vec![false; (w * h) as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let c = at(x, y);
            let jump = [(1, 0), (0, 1), (-1, 0), (0, -1)]
                .iter()
                .any(|(dx, dy)| (at(x + dx, y + dy) - c).abs() > 24);
            edges[(y as u32 * w + x as u32) as usize] = jump && c < 255;
        }
    }
    let radius = (w / 128) as i64;
    GrayImage::from_fn(w, h, |x, y| {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && edges[(ny as u32 * w + nx as u32) as usize] {
                    return Luma([0]);
                }
            }
        }
        Luma([255])
    })
}

/// Outline strokes, optionally over a flat fill of everything the render covers.
pub fn draw_sketch(render: &GrayImage, style: SketchStyle) -> GrayImage {
    let mut out = trace_edges(render);
    for (o, r) in out.pixels_mut().zip(render.pixels()) {
        let v = r.0[0];
        if o.0[0] == 255 && v < 255 {
            o.0[0] = match style {
                SketchStyle::Outline => 255,
                SketchStyle::Filled => 160,
                SketchStyle::Shaded => (v / 64) * 64 + 32,
            };
        }
    }
    out
}

fn jitter(seed: u64, key: &str) -> f32 {
    rng(stable_hash(&[&seed.to_le_bytes(), key.as_bytes()])).random_range(0.9..1.1)
}

/// Writes meshes and sketches in the standard layout under `<root>/synthetic/`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    let base = root.join(DATASET_DIR);
    let seen = SEEN.iter().map(|c| (*c, cfg.seen_shapes, "train"));
    let unseen = UNSEEN.iter().map(|c| (*c, cfg.unseen_shapes, "test"));
    for (category, shapes, role) in seen.chain(unseen) {
        let shape_dir = base.join("shapes").join(category);
        fs::create_dir_all(&shape_dir).map_err(|e| Error::io_at(&shape_dir, e))?;
        for i in 0..shapes {
            let mesh = shape_mesh(category, jitter(cfg.seed, &format!("{category}/m{i}")))?;
            mesh.write_obj(&shape_dir.join(format!("m{i:02}.obj")))?;
        }
        let sketch_dir = base.join("sketches").join(category).join(role);
        fs::create_dir_all(&sketch_dir).map_err(|e| Error::io_at(&sketch_dir, e))?;
        for i in 0..cfg.sketches_per_category {
            let key = format!("{category}/s{i}");
            let mut r = rng(stable_hash(&[&cfg.seed.to_le_bytes(), key.as_bytes()]));
            let mesh = shape_mesh(category, r.random_range(0.9..1.1))?.normalized()?;
            let elevation = cfg.elevation_deg + r.random_range(-5.0..5.0);
            let azimuth = r.random_range(0.0..360.0);
            let render = render_view(&mesh, azimuth, elevation, cfg.image_size, Projection::Perspective);
            draw_sketch(&render, cfg.style).save(sketch_dir.join(format!("s{i:02}.png")))?;
        }
    }
    Ok(base)
}

/// Scaled-down training defaults for the synthetic corpus.
pub fn smoke_train_config(run_dir: &Path, steps: u64) -> crate::train::TrainConfig {
    crate::train::TrainConfig {
        name: "smoke".into(),
        run_dir: run_dir.to_path_buf(),
        learning_rate: 1e-3,
        batch_size: 2 * SEEN.len() * 2,
        classes_per_batch: SEEN.len(),
        views_per_shape: 3,
        max_steps: Some(steps),
        checkpoint_every: 0,
        model: crate::model::ModelConfig {
            profile: "desk".into(),
            image_size: 64,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn rig(cfg: &SynthConfig) -> CameraRig {
    CameraRig::ring(cfg.views, cfg.elevation_deg, cfg.image_size, Projection::Perspective)
}

/// Writes the corpus, renders and selects views, captions, and splits it.
/// The manifest is saved as `<root>/synthetic/manifest.jsonl`.
pub fn build(
    root: &Path,
    cfg: &SynthConfig,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
    views_per_shape: usize,
) -> Result<(DatasetManifest, SplitSpec)> {
    let base = write_dataset(root, cfg)?;
    let mut manifest = load_manifest(root, DatasetName::Other(DATASET_DIR.into()))?;
    render_all(&mut manifest, &rig(cfg), &base.join("views"))?;
    select_all(&mut manifest, clip, views_per_shape, cfg.image_size)?;
    caption_all(&mut manifest, captioner, cfg.image_size)?;
    let opts = SplitOptions {
        split1_seen: None,
        split2_max_shapes: cfg.unseen_shapes,
    };
    let split = make_split_with(&manifest, SplitProtocol::SplitII, &opts)?;
    apply_split(&mut manifest, &split);
    manifest.save(&base.join("manifest.jsonl"))?;
    split.save(&base.join("split.json"))?;
    Ok((manifest, split))
}
