//! Frozen denoiser contract and hooked multi-scale feature capture.
//!
//! An image goes through the latent encoder, is noised to timestep `t`, and
//! passes once through the denoiser. The six hooked block outputs (three
//! down, three up) are the features; the noise estimate is discarded.

pub mod cache;
mod hooks;
mod mock;
mod schedule;

use candle_core::Tensor;

pub use cache::{FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use hooks::{inject_local, BlockHooks, CaptureHooks, HookPoint, LocalInjection, NoHooks};
pub use mock::{token_row, tokenize, MockBackbone, LATENT_FACTOR};
pub use schedule::{add_noise, add_noise_scalar, add_noise_with, noise, NoiseSchedule, DEFAULT_TIMESTEP};

use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{all_finite, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSite {
    pub point: HookPoint,
    pub channels: usize,
}

/// Image-token keys and values for each attention site, `(B, T, attn_dim)`.
#[derive(Debug, Clone)]
pub struct ImagePrompt {
    pub kv: Vec<(Tensor, Tensor)>,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiseCond {
    /// `(B, text_len, context_dim)` cross-attention context.
    pub context: Tensor,
    /// `(B, text_dim_g)` vector added to the time embedding.
    pub pooled: Tensor,
    pub image: Option<ImagePrompt>,
}

impl DenoiseCond {
    pub fn validate(&self, batch: usize, dims: &ModelDims, sites: usize) -> Result<()> {
        let want = [batch, dims.text_len, dims.context_dim()];
        if self.context.dims() != want {
            return Err(Error::ShapeMismatch(format!(
                "context {:?}, expected {want:?}",
                self.context.dims()
            )));
        }
        if self.pooled.dims() != [batch, dims.text_dim_g] {
            return Err(Error::ShapeMismatch(format!(
                "pooled {:?}, expected [{batch}, {}]",
                self.pooled.dims(),
                dims.text_dim_g
            )));
        }
        if let Some(image) = &self.image {
            if image.kv.len() != sites {
                return Err(Error::ShapeMismatch(format!(
                    "{} image key/value pairs for {sites} attention sites",
                    image.kv.len()
                )));
            }
        }
        Ok(())
    }
}

pub trait Backbone: Send + Sync {
    fn dims(&self) -> &ModelDims;
    fn schedule(&self) -> &NoiseSchedule;
    /// Image side / latent side.
    fn latent_factor(&self) -> usize;
    /// `(B, H, W, 3)` in `[-1, 1]` to a `(B, H/8 * W/8, latent_channels)` map. Deterministic.
    fn encode_latent(&self, images: &Tensor) -> Result<FeatureMap>;
    /// `(text_len, text_dim_l)` token embeddings from the first text encoder.
    fn encode_text(&self, text: &str) -> Result<Tensor>;
    fn attention_sites(&self) -> Vec<AttentionSite>;
    /// One denoiser pass; `hooks` sees each hooked block output in order.
    fn denoise(&self, z_t: &FeatureMap, t: usize, cond: &DenoiseCond, hooks: &mut dyn BlockHooks)
        -> Result<FeatureMap>;
    /// Hash of all weights; constant for a frozen backbone.
    fn checksum(&self) -> String;
}

/// Resolves a backbone key. Only `"mock"` is available without model assets.
pub fn open_backbone(key: &str, dims: ModelDims) -> Result<Box<dyn Backbone>> {
    match key {
        "mock" => Ok(Box::new(MockBackbone::new(dims))),
        other => Err(Error::BackboneUnavailable(format!(
            "no weights for backbone {other:?}; use the mock backbone"
        ))),
    }
}

/// Six hooked maps in order `Down1, Down2, Down3, Up1, Up2, Up3`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub maps: Vec<FeatureMap>,
}

impl MultiScaleFeatures {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.maps.iter().map(FeatureMap::shape).collect()
    }

    pub fn batch(&self) -> usize {
        self.maps.first().map_or(0, FeatureMap::batch)
    }

    /// Rows `start..start + len` of every map.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| m.map(m.data.narrow(0, start, len)?))
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }

    pub fn detach(&self) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .map(|m| FeatureMap {
                    data: m.data.detach(),
                    h: m.h,
                    w: m.w,
                })
                .collect(),
        }
    }
}

/// Collects hook output into validated multi-scale features.
pub fn collect_features(captured: Vec<(HookPoint, FeatureMap)>, dims: &ModelDims) -> Result<MultiScaleFeatures> {
    let points: Vec<HookPoint> = captured.iter().map(|(p, _)| *p).collect();
    if points != HookPoint::ALL {
        return Err(Error::HookMismatch(format!(
            "expected six hooks Down1..Up3 in order, got {points:?}"
        )));
    }
    let channels = dims.hook_channels();
    let maps: Vec<FeatureMap> = captured.into_iter().map(|(_, m)| m).collect();
    for (i, (m, want)) in maps.iter().zip(channels).enumerate() {
        if m.channels() != want {
            return Err(Error::HookMismatch(format!(
                "hook {:?} has {} channels, expected {want}",
                HookPoint::ALL[i],
                m.channels()
            )));
        }
        if !all_finite(&m.data)? {
            return Err(Error::NonFiniteFeatures(format!("{:?}", HookPoint::ALL[i])));
        }
    }
    Ok(MultiScaleFeatures { maps })
}

/// Encodes, noises to `t` with one seed per item, runs one conditioned
/// denoiser pass, and returns the six hooked maps.
pub fn extract_features(
    backbone: &dyn Backbone,
    images: &Tensor,
    cond: &DenoiseCond,
    local: Option<&LocalInjection>,
    t: usize,
    seeds: &[u64],
) -> Result<MultiScaleFeatures> {
    let z0 = backbone.encode_latent(images)?;
    let z_t = z0.map(add_noise(&z0.data, t, seeds, backbone.schedule())?)?;
    let mut hooks = CaptureHooks::new(local);
    backbone.denoise(&z_t, t, cond, &mut hooks)?;
    collect_features(hooks.captured, backbone.dims())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn cond(dims: &ModelDims, b: usize) -> DenoiseCond {
        DenoiseCond {
            context: Tensor::zeros((b, dims.text_len, dims.context_dim()), candle_core::DType::F32, &Device::Cpu)
                .unwrap(),
            pooled: Tensor::zeros((b, dims.text_dim_g), candle_core::DType::F32, &Device::Cpu).unwrap(),
            image: None,
        }
    }

    #[test]
    fn desk_features_have_hook_signature() {
        let dims = ModelDims::desk();
        let bb = MockBackbone::new(dims.clone());
        let images = Tensor::zeros((2, 64, 64, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        let f = extract_features(&bb, &images, &cond(&dims, 2), None, DEFAULT_TIMESTEP, &[1, 2]).unwrap();
        let want: Vec<_> = dims
            .hook_strides()
            .iter()
            .zip(dims.hook_channels())
            .map(|(&s, c)| (64 / s, 64 / s, c))
            .collect();
        assert_eq!(f.shapes(), want);
    }

    #[test]
    fn rejects_bad_sizes_and_timesteps() {
        let dims = ModelDims::desk();
        let bb = MockBackbone::new(dims.clone());
        let odd = Tensor::zeros((1, 60, 64, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.encode_latent(&odd), Err(Error::BadImageSize { .. })));
        let img = Tensor::zeros((1, 64, 64, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        let r = extract_features(&bb, &img, &cond(&dims, 1), None, 1000, &[0]);
        assert!(matches!(r, Err(Error::InvalidTimestep { .. })));
    }

    #[test]
    fn text_encoder_pads_to_length() {
        let dims = ModelDims::desk();
        let bb = MockBackbone::new(dims.clone());
        let e = bb.encode_text("A Chair!").unwrap();
        assert_eq!(e.dims(), &[dims.text_len, dims.text_dim_l]);
        let toks = tokenize("A Chair!", 6);
        assert_eq!(toks, ["<bos>", "a", "chair", "<eos>", "<pad>", "<pad>"]);
    }

    #[test]
    fn unknown_backbone_is_unavailable() {
        assert!(matches!(
            open_backbone("stabilityai/sdxl", ModelDims::desk()),
            Err(Error::BackboneUnavailable(_))
        ));
    }
}
