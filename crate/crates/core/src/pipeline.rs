//! Manifest-wide preprocessing stages: render candidates, select views, caption.

use std::path::Path;

use image::DynamicImage;

use crate::dataset::render::render_to_dir;
use crate::dataset::{CameraRig, DatasetManifest};
use crate::encoders::{Captioner, ClipEncoder, Modality};
use crate::error::Result;
use crate::imaging::{load_image, preprocess};
use crate::select::{select_views, ViewSelection};

/// Renders every shape's candidate views under `<out>/<shape id>/`.
pub fn render_all(manifest: &mut DatasetManifest, rig: &CameraRig, out: &Path) -> Result<usize> {
    rig.validate()?;
    let mut count = 0;
    for shape in &mut manifest.shapes {
        let dir = out.join(&shape.id);
        shape.candidate_uris = render_to_dir(shape, rig, &dir)?;
        shape.view_uris.clear();
        shape.view_indices.clear();
        shape.view_scores.clear();
        shape.captions.clear();
        count += shape.candidate_uris.len();
    }
    Ok(count)
}

/// Keeps the `k` candidates closest to each shape's category anchor.
pub fn select_all(manifest: &mut DatasetManifest, clip: &dyn ClipEncoder, k: usize, size: u32) -> Result<Vec<ViewSelection>> {
    let mut out = Vec::with_capacity(manifest.shapes.len());
    for shape in &mut manifest.shapes {
        let images = shape
            .candidate_uris
            .iter()
            .map(|p| preprocess(&load_image(p)?, size))
            .collect::<Result<Vec<_>>>()?;
        let sel = select_views(&shape.id, Some(&shape.category), &images, clip, k)?;
        shape.view_uris = sel.selected_indices.iter().map(|&i| shape.candidate_uris[i].clone()).collect();
        shape.view_indices = sel.selected_indices.clone();
        shape.view_scores = sel.scores.clone();
        shape.captions.clear();
        out.push(sel);
    }
    Ok(out)
}

/// Fills captions: selected views are captioned with their category, sketches without.
pub fn caption_all(manifest: &mut DatasetManifest, captioner: &dyn Captioner, size: u32) -> Result<()> {
    let load = |p: &Path| -> Result<image::RgbImage> { preprocess(&load_image(p)?, size) };
    for shape in &mut manifest.shapes {
        shape.captions = shape
            .view_uris
            .iter()
            .map(|p| captioner.caption(&load(p)?, Modality::Render, Some(&shape.category)))
            .collect::<Result<_>>()?;
    }
    for sketch in &mut manifest.sketches {
        sketch.caption = Some(captioner.caption(&load(&sketch.uri)?, Modality::Sketch, None)?);
    }
    Ok(())
}

/// Loads the `n`-th selected view of a shape, for thumbnails.
pub fn selected_view(manifest: &DatasetManifest, shape_id: &str, n: usize) -> Option<DynamicImage> {
    let shape = manifest.shape(shape_id)?;
    load_image(shape.view_uris.get(n)?).ok()
}
