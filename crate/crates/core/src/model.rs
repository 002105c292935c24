//! The trainable retrieval model: conditioning parameters, scale adapters,
//! fusion logits, and the classification head, plus the embedding pass
//! that threads images through the frozen backbone.

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, pool_views_tensor};
use crate::backbone::FeatureCache;
use crate::backbone::{extract_features, Backbone, MultiScaleFeatures};
use crate::conditioning::{self, assemble, ConditioningConfig};
use crate::dims::ModelDims;
use crate::encoders::{Captioner, ClipEncoder, Modality, VisualTokens};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, preprocess};
use crate::nn::l2_normalize_rows;
use crate::objectives::{self, ClassIndex};
use crate::params::ParamStore;
use crate::util::{stable_hash, Checksum};
use candle_core::Tensor;

/// An image ready for the backbone: preprocessed pixels, caption, and visual tokens.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
    pub tokens: VisualTokens,
}

/// Everything about an image that does not depend on trainable parameters.
pub fn prepare(
    id: &str,
    raw: &DynamicImage,
    size: u32,
    modality: Modality,
    caption: Option<&str>,
    hint: Option<&str>,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
) -> Result<PreparedImage> {
    let image = preprocess(raw, size)?;
    let caption = match caption {
        Some(c) => c.to_string(),
        None => captioner.caption(&image, modality, hint)?,
    };
    let tokens = clip.visual_tokens(&image)?;
    Ok(PreparedImage {
        id: id.to_string(),
        image,
        caption,
        tokens,
    })
}

/// Evaluation noise seed, derived from the preprocessed pixels so the same
/// image gets the same noise whatever it is called.
pub fn eval_seed(image: &RgbImage) -> u64 {
    stable_hash(&[b"eval-noise", image.as_raw()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `"full"` or `"desk"`.
    pub profile: String,
    pub image_size: u32,
    pub timestep: usize,
    pub conditioning: ConditioningConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            profile: "full".into(),
            image_size: 1024,
            timestep: crate::backbone::DEFAULT_TIMESTEP,
            conditioning: ConditioningConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::by_name(&self.profile)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown profile {:?}", self.profile)))
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub classes: ClassIndex,
}

impl Model {
    pub fn new(config: ModelConfig, classes: Vec<String>, cls_temperature: f32, seed: u64) -> Result<Self> {
        let dims = config.dims()?;
        if classes.is_empty() {
            return Err(Error::InsufficientData("classifier needs at least one class".into()));
        }
        let mut store = ParamStore::new();
        conditioning::register_params(&mut store, &dims, &config.conditioning, seed)?;
        aggregation::register_params(&mut store, &dims, seed)?;
        objectives::register_head(&mut store, classes.len(), dims.embed_dim, cls_temperature, seed)?;
        Ok(Self {
            config,
            dims,
            store,
            classes: ClassIndex { names: classes },
        })
    }

    pub fn check_backbone(&self, backbone: &dyn Backbone) -> Result<()> {
        if backbone.dims() != &self.dims {
            return Err(Error::ShapeMismatch(format!(
                "model profile {:?} does not match backbone dims",
                self.config.profile
            )));
        }
        Ok(())
    }

    /// Six hooked maps for a batch of prepared images.
    pub fn features(&self, backbone: &dyn Backbone, items: &[&PreparedImage], seeds: &[u64]) -> Result<MultiScaleFeatures> {
        let images: Vec<RgbImage> = items.iter().map(|p| p.image.clone()).collect();
        let captions: Vec<String> = items.iter().map(|p| p.caption.clone()).collect();
        let tokens: Vec<VisualTokens> = items.iter().map(|p| p.tokens.clone()).collect();
        let bundle = assemble(&self.store, backbone, &self.config.conditioning, &captions, &tokens)?;
        extract_features(
            backbone,
            &images_to_tensor(&images)?,
            &bundle.cond,
            bundle.local.as_ref(),
            self.config.timestep,
            seeds,
        )
    }

    /// Pre-normalization fused vectors `(B, D)`.
    pub fn fused(&self, backbone: &dyn Backbone, items: &[&PreparedImage], seeds: &[u64]) -> Result<Tensor> {
        let features = self.features(backbone, items, seeds)?;
        aggregation::aggregate(&features, &self.store, &self.dims)
    }

    /// Unit-length image embeddings `(B, D)`.
    pub fn embed_images(&self, backbone: &dyn Backbone, items: &[&PreparedImage], seeds: &[u64]) -> Result<Tensor> {
        l2_normalize_rows(&self.fused(backbone, items, seeds)?)
    }

    /// Unit-length shape embeddings from `views_per_shape` consecutive views each.
    pub fn embed_shapes(
        &self,
        backbone: &dyn Backbone,
        views: &[&PreparedImage],
        views_per_shape: usize,
        seeds: &[u64],
    ) -> Result<Tensor> {
        if views_per_shape == 0 || views.len() % views_per_shape != 0 {
            return Err(Error::EmptyViewSet(format!(
                "{} views cannot be grouped by {views_per_shape}",
                views.len()
            )));
        }
        let fused = self.fused(backbone, views, seeds)?;
        let d = fused.dims2()?.1;
        pool_views_tensor(&fused.reshape((views.len() / views_per_shape, views_per_shape, d))?)
    }

    /// Embeds in chunks without building a gradient graph; rows are unit vectors.
    pub fn embed_detached(
        &self,
        backbone: &dyn Backbone,
        items: &[&PreparedImage],
        chunk: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(items.len());
        for group in items.chunks(chunk.max(1)) {
            let seeds: Vec<u64> = group.iter().map(|p| eval_seed(&p.image)).collect();
            let e = self.embed_images(backbone, group, &seeds)?.detach();
            out.extend(e.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Pre-normalization fused vectors without a gradient graph.
    pub fn fused_detached(&self, backbone: &dyn Backbone, items: &[&PreparedImage], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(items.len());
        for group in items.chunks(chunk.max(1)) {
            let seeds: Vec<u64> = group.iter().map(|p| eval_seed(&p.image)).collect();
            out.extend(self.fused(backbone, group, &seeds)?.detach().to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Cache key for one item's hooked maps under the current parameters.
    /// `params` is the store checksum, computed once per pass by the caller.
    pub fn feature_key(&self, backbone: &dyn Backbone, params: &str, item: &PreparedImage) -> String {
        let mut sum = Checksum::new();
        for part in [backbone.checksum().as_str(), params, &self.config.profile, &item.caption] {
            sum.update(&(part.len() as u64).to_le_bytes());
            sum.update(part.as_bytes());
        }
        sum.update(&eval_seed(&item.image).to_le_bytes());
        sum.update(item.image.as_raw());
        sum.finish()
    }

    /// Like [`Model::fused_detached`], reusing hooked maps from `cache` when present.
    pub fn fused_cached(
        &self,
        backbone: &dyn Backbone,
        items: &[&PreparedImage],
        chunk: usize,
        cache: Option<&FeatureCache>,
    ) -> Result<Vec<Vec<f32>>> {
        let Some(cache) = cache else {
            return self.fused_detached(backbone, items, chunk);
        };
        let params = self.store.checksum()?;
        let t = self.config.timestep;
        let keys: Vec<String> = items.iter().map(|p| self.feature_key(backbone, &params, p)).collect();
        let mut out: Vec<Option<Vec<f32>>> = vec![None; items.len()];
        let mut missing = Vec::new();
        for (i, item) in items.iter().enumerate() {
            match cache.get(&item.id, t, &keys[i])? {
                Some(f) => {
                    let v = aggregation::aggregate(&f, &self.store, &self.dims)?.detach();
                    out[i] = v.to_vec2::<f32>()?.pop();
                }
                None => missing.push(i),
            }
        }
        for group in missing.chunks(chunk.max(1)) {
            let batch: Vec<&PreparedImage> = group.iter().map(|&i| items[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|p| eval_seed(&p.image)).collect();
            let features = self.features(backbone, &batch, &seeds)?.detach();
            for (j, &i) in group.iter().enumerate() {
                let one = features.narrow(j, 1)?;
                cache.put(&items[i].id, t, &keys[i], &one)?;
                // aggregate from the stored single-item maps so hits and misses agree exactly
                let v = aggregation::aggregate(&one, &self.store, &self.dims)?.detach();
                out[i] = v.to_vec2::<f32>()?.pop();
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every item embedded")).collect())
    }

    pub fn params_checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}
