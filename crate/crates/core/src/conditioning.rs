//! Multimodal conditioning: hard and soft text prompts, global image tokens
//! through decoupled cross-attention, and local patch maps added to the
//! down-block features.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DenoiseCond, ImagePrompt, LocalInjection};
use crate::dims::ModelDims;
use crate::encoders::VisualTokens;
use crate::error::{Error, Result};
use crate::nn::{linear, FeatureMap};
use crate::params::{Decay, ParamStore};
use crate::util::{gaussian, stable_hash};

pub const SOFT_PROMPT: &str = "cond.soft_prompt";
pub const IMAGE_PROJ_WEIGHT: &str = "cond.image_proj.weight";
pub const IMAGE_PROJ_BIAS: &str = "cond.image_proj.bias";

pub fn kv_names(site: usize) -> (String, String) {
    (format!("cond.image_kv.{site}.key"), format!("cond.image_kv.{site}.value"))
}

pub fn local_kernel_name(block: usize) -> String {
    format!("cond.local.{block}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub ip_scale: f64,
    pub soft_init_std: f32,
    pub soft_l2: f64,
    pub use_global: bool,
    pub use_local: bool,
    pub use_hard: bool,
    pub use_soft: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            ip_scale: 1.0,
            soft_init_std: 0.02,
            soft_l2: 1e-4,
            use_global: true,
            use_local: true,
            use_hard: true,
            use_soft: true,
        }
    }
}

/// Registers the soft prompt and injection parameters. Value projections
/// and local kernels start at zero so the first pass equals the
/// uninjected baseline.
pub fn register_params(store: &mut ParamStore, dims: &ModelDims, cfg: &ConditioningConfig, seed: u64) -> Result<()> {
    let s = |name: &str| stable_hash(&[&seed.to_le_bytes(), name.as_bytes()]);
    let (e, dc, a, t) = (dims.vision_dim, dims.context_dim(), dims.attn_dim, dims.t_tokens);

    let soft_len = (dims.text_len + 1) * dims.text_dim_g;
    store.insert(
        SOFT_PROMPT,
        gaussian(s(SOFT_PROMPT), soft_len, cfg.soft_init_std),
        &[dims.text_len + 1, dims.text_dim_g],
        Decay::Apply,
    )?;
    store.set_trainable(SOFT_PROMPT, cfg.use_soft)?;

    store.insert(
        IMAGE_PROJ_WEIGHT,
        gaussian(s(IMAGE_PROJ_WEIGHT), e * t * dc, 1.0 / (e as f32).sqrt()),
        &[e, t * dc],
        Decay::Apply,
    )?;
    store.insert(IMAGE_PROJ_BIAS, vec![0.0; t * dc], &[t * dc], Decay::Apply)?;
    for site in 0..6 {
        let (k, v) = kv_names(site);
        store.insert(&k, gaussian(s(&k), dc * a, 0.02), &[dc, a], Decay::Apply)?;
        store.insert(&v, vec![0.0; dc * a], &[dc, a], Decay::Apply)?;
    }
    for (n, &c) in dims.stage_channels.iter().enumerate() {
        store.insert(local_kernel_name(n), vec![0.0; e * c], &[e, c], Decay::Apply)?;
    }
    for name in [IMAGE_PROJ_WEIGHT, IMAGE_PROJ_BIAS] {
        store.set_trainable(name, cfg.use_global)?;
    }
    for site in 0..6 {
        let (k, v) = kv_names(site);
        store.set_trainable(&k, cfg.use_global)?;
        store.set_trainable(&v, cfg.use_global)?;
    }
    for n in 0..3 {
        store.set_trainable(&local_kernel_name(n), cfg.use_local)?;
    }
    Ok(())
}

/// Hard prompt through the backbone's first text encoder, `(text_len, text_dim_l)`.
pub fn encode_hard_prompt(text: &str, backbone: &dyn Backbone) -> Result<Tensor> {
    backbone.encode_text(text)
}

/// Row `i` of the context is `hard[i] ++ soft[i + 1]`; the pooled vector is `soft[0]`.
///
/// `hard` is `(B, m, d_L)` and `soft` is `(m + 1, d_G)`; returns
/// `(B, m, d_L + d_G)` and `(B, d_G)`.
pub fn build_context(hard: &Tensor, soft: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, m, _) = hard.dims3()?;
    let (rows, dg) = soft.dims2()?;
    if rows != m + 1 {
        return Err(Error::ShapeMismatch(format!(
            "soft prompt has {rows} rows, hard prompt has {m} tokens"
        )));
    }
    let tail = soft.narrow(0, 1, m)?.unsqueeze(0)?.broadcast_as((b, m, dg))?;
    let context = Tensor::cat(&[hard, &tail.contiguous()?], 2)?;
    let pooled = soft.narrow(0, 0, 1)?.broadcast_as((b, dg))?.contiguous()?;
    Ok((context, pooled))
}

/// `(B, E)` class tokens to `(B, tokens, width)` image tokens.
pub fn project_global(cls: &Tensor, weight: &Tensor, bias: &Tensor, tokens: usize) -> Result<Tensor> {
    let b = cls.dims2()?.0;
    let out = linear(cls, weight, Some(bias))?;
    let total = out.dims2()?.1;
    if total % tokens != 0 {
        return Err(Error::ShapeMismatch(format!(
            "projection width {total} is not a multiple of {tokens} tokens"
        )));
    }
    Ok(out.reshape((b, tokens, total / tokens))?)
}

/// Patch tokens `(B, p*p, E)` mapped to `channels` by a 1x1 kernel, kept at patch resolution.
pub fn channel_map(patches: &Tensor, grid: usize, kernel: &Tensor) -> Result<FeatureMap> {
    FeatureMap::new(linear(patches, kernel, None)?, grid, grid)
}

/// Stacks per-item visual tokens into `(B, E)` class and `(B, p*p, E)` patch tensors.
pub fn stack_visual(tokens: &[VisualTokens]) -> Result<(Tensor, Tensor, usize)> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::InvalidArgument("no visual tokens".into()))?;
    let (g, e) = (first.grid, first.dim);
    let mut cls = Vec::with_capacity(tokens.len() * e);
    let mut patches = Vec::with_capacity(tokens.len() * g * g * e);
    for t in tokens {
        if t.grid != g || t.dim != e || t.patches.len() != g * g * e || t.cls.len() != e {
            return Err(Error::ShapeMismatch("inconsistent visual token shapes".into()));
        }
        cls.extend_from_slice(&t.cls);
        patches.extend_from_slice(&t.patches);
    }
    let b = tokens.len();
    Ok((
        Tensor::from_vec(cls, (b, e), &Device::Cpu)?,
        Tensor::from_vec(patches, (b, g * g, e), &Device::Cpu)?,
        g,
    ))
}

/// Everything one denoiser pass needs beyond the latent.
pub struct ConditioningBundle {
    pub cond: DenoiseCond,
    pub local: Option<LocalInjection>,
}

/// Assembles the bundle for a batch from captions, visual tokens, and the
/// current parameter values.
pub fn assemble(
    store: &ParamStore,
    backbone: &dyn Backbone,
    cfg: &ConditioningConfig,
    captions: &[String],
    visual: &[VisualTokens],
) -> Result<ConditioningBundle> {
    let dims = backbone.dims();
    let b = captions.len();
    if visual.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} captions for {} visual token sets",
            visual.len()
        )));
    }
    let mut hard = Vec::with_capacity(b);
    for caption in captions {
        let text = if cfg.use_hard { caption.as_str() } else { "" };
        hard.push(encode_hard_prompt(text, backbone)?);
    }
    let hard = Tensor::stack(&hard, 0)?;
    let soft = if cfg.use_soft {
        store.var(SOFT_PROMPT)?.as_tensor().clone()
    } else {
        Tensor::zeros((dims.text_len + 1, dims.text_dim_g), DType::F32, &Device::Cpu)?
    };
    let (context, pooled) = build_context(&hard, &soft)?;

    let (cls, patches, grid) = stack_visual(visual)?;
    let image = if cfg.use_global {
        let tokens = project_global(
            &cls,
            store.var(IMAGE_PROJ_WEIGHT)?.as_tensor(),
            store.var(IMAGE_PROJ_BIAS)?.as_tensor(),
            dims.t_tokens,
        )?;
        let kv = (0..6)
            .map(|site| {
                let (k, v) = kv_names(site);
                Ok((
                    linear(&tokens, store.var(&k)?.as_tensor(), None)?,
                    linear(&tokens, store.var(&v)?.as_tensor(), None)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(ImagePrompt {
            kv,
            scale: cfg.ip_scale,
        })
    } else {
        None
    };
    let local = if cfg.use_local {
        let maps = [0, 1, 2].map(|n| {
            store
                .var(&local_kernel_name(n))
                .and_then(|k| channel_map(&patches, grid, k.as_tensor()))
        });
        let [m0, m1, m2] = maps;
        Some(LocalInjection {
            maps: [m0?, m1?, m2?],
        })
    } else {
        None
    };
    Ok(ConditioningBundle {
        cond: DenoiseCond {
            context,
            pooled,
            image,
        },
        local,
    })
}

/// `soft_l2 * sum(soft^2)`, or zero when the soft prompt is disabled.
pub fn soft_penalty(store: &ParamStore, cfg: &ConditioningConfig) -> Result<Tensor> {
    if !cfg.use_soft || cfg.soft_l2 == 0.0 {
        return Ok(Tensor::new(0f32, &Device::Cpu)?);
    }
    Ok(store
        .var(SOFT_PROMPT)?
        .as_tensor()
        .sqr()?
        .sum_all()?
        .affine(cfg.soft_l2, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_concatenates_rows() {
        let hard = Tensor::from_vec((0..6).map(|v| v as f32).collect(), (1, 3, 2), &Device::Cpu).unwrap();
        let soft = Tensor::from_vec((0..4).map(|v| 10.0 + v as f32).collect(), (4, 1), &Device::Cpu).unwrap();
        let (ctx, pooled) = build_context(&hard, &soft).unwrap();
        assert_eq!(
            ctx.to_vec3::<f32>().unwrap()[0],
            vec![vec![0.0, 1.0, 11.0], vec![2.0, 3.0, 12.0], vec![4.0, 5.0, 13.0]]
        );
        assert_eq!(pooled.to_vec2::<f32>().unwrap(), vec![vec![10.0]]);
        let bad = Tensor::zeros((3, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(build_context(&hard, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identity_projection_reshapes() {
        let cls = Tensor::from_vec((0..8).map(|v| v as f32).collect(), (1, 8), &Device::Cpu).unwrap();
        let eye = Tensor::eye(8, DType::F32, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        let tokens = project_global(&cls, &eye, &zero, 4).unwrap();
        assert_eq!(tokens.dims(), &[1, 4, 2]);
        assert_eq!(tokens.to_vec3::<f32>().unwrap()[0][3], vec![6.0, 7.0]);
    }

    #[test]
    fn registered_shapes() {
        let dims = ModelDims::desk();
        let mut store = ParamStore::new();
        register_params(&mut store, &dims, &ConditioningConfig::default(), 1).unwrap();
        let soft = store.var(SOFT_PROMPT).unwrap();
        assert_eq!(soft.dims(), &[dims.text_len + 1, dims.text_dim_g]);
        let v = store.var(&kv_names(3).1).unwrap().as_tensor().abs().unwrap().sum_all().unwrap();
        assert_eq!(v.to_scalar::<f32>().unwrap(), 0.0);
    }
}
