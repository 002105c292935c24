//! Top-k candidate view selection against a category text anchor.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::encoders::ClipEncoder;
use crate::error::{Error, Result};
use crate::util::{dot, normalize_in_place};

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSelection {
    pub shape_id: String,
    pub selected_indices: Vec<usize>,
    pub scores: Vec<f32>,
}

pub fn anchor_prompt(category: &str) -> String {
    format!("a photo of {category}.")
}

pub fn embed_views(images: &[RgbImage], encoder: &dyn ClipEncoder) -> Result<Vec<Vec<f32>>> {
    images.iter().map(|img| encoder.embed_image(img)).collect()
}

pub fn text_anchor(category: &str, encoder: &dyn ClipEncoder) -> Result<Vec<f32>> {
    if category.is_empty() {
        return Err(Error::InvalidArgument("empty category name".into()));
    }
    encoder.embed_text(&anchor_prompt(category))
}

/// Indices of the `k` highest cosine scores, descending, ties by ascending index.
/// `k` larger than the candidate count is clamped.
pub fn select_top_k(views: &[Vec<f32>], anchor: &[f32], k: usize) -> (Vec<usize>, Vec<f32>) {
    let mut scored: Vec<(usize, f64)> = views
        .iter()
        .enumerate()
        .map(|(i, v)| (i, dot(v, anchor)))
        .collect();
    if k > views.len() {
        log::warn!("k={k} exceeds {} candidate views; keeping all", views.len());
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(views.len()));
    scored.into_iter().map(|(i, s)| (i, s as f32)).unzip()
}

/// Ranks views by similarity to their normalized mean; used when a shape has no category.
pub fn select_by_centrality(views: &[Vec<f32>], k: usize) -> (Vec<usize>, Vec<f32>) {
    let Some(first) = views.first() else {
        return (Vec::new(), Vec::new());
    };
    let mut mean = vec![0.0f32; first.len()];
    for v in views {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    normalize_in_place(&mut mean);
    select_top_k(views, &mean, k)
}

/// Embeds a shape's candidate renders and keeps the best `k`.
pub fn select_views(
    shape_id: &str,
    category: Option<&str>,
    images: &[RgbImage],
    encoder: &dyn ClipEncoder,
    k: usize,
) -> Result<ViewSelection> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptyViewSet(shape_id.to_string()));
    }
    let views = embed_views(images, encoder)?;
    let (selected_indices, scores) = match category.filter(|c| !c.is_empty()) {
        Some(c) => select_top_k(&views, &text_anchor(c, encoder)?, k),
        None => select_by_centrality(&views, k),
    };
    Ok(ViewSelection {
        shape_id: shape_id.to_string(),
        selected_indices,
        scores,
    })
}
