//! Procedural stand-in for a latent-diffusion U-Net.
//!
//! Weights are fixed Gaussians seeded by parameter name, so every instance
//! with the same dims is identical. The topology mirrors a three-stage
//! U-Net: three down blocks (strides 8/16/32 of the image), a bottleneck up
//! block, and two up blocks with skip concatenation. Each block mixes in the
//! time embedding, attends to the text context, and optionally to image
//! tokens through a separate key/value pair.

use candle_core::{Device, Tensor};

use super::{AttentionSite, Backbone, DenoiseCond, HookPoint, NoiseSchedule};
use super::hooks::BlockHooks;
use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{avg_pool, linear, rms_norm_last, softmax_last, timestep_embedding, upsample2, FeatureMap};
use crate::util::{gaussian, stable_hash, Checksum};

pub const LATENT_FACTOR: usize = 8;

struct Weight {
    name: String,
    values: Vec<f32>,
    tensor: Tensor,
}

fn weight(name: &str, rows: usize, cols: usize) -> Weight {
    let values = gaussian(
        stable_hash(&[b"mock-backbone", name.as_bytes()]),
        rows * cols,
        1.0 / (rows as f32).sqrt(),
    );
    let tensor = Tensor::from_vec(values.clone(), (rows, cols), &Device::Cpu)
        .expect("weight shape matches its values");
    Weight {
        name: name.to_string(),
        values,
        tensor,
    }
}

struct Block {
    proj_in: Weight,
    time: Weight,
    query: Weight,
    text_key: Weight,
    text_value: Weight,
    out: Weight,
    channels: usize,
}

impl Block {
    fn new(name: &str, in_dim: usize, channels: usize, dims: &ModelDims) -> Self {
        let (a, dc) = (dims.attn_dim, dims.context_dim());
        Self {
            proj_in: weight(&format!("{name}.proj_in"), in_dim, channels),
            time: weight(&format!("{name}.time"), dims.text_dim_g, channels),
            query: weight(&format!("{name}.query"), channels, a),
            text_key: weight(&format!("{name}.text_key"), dc, a),
            text_value: weight(&format!("{name}.text_value"), dc, a),
            out: weight(&format!("{name}.out"), a, channels),
            channels,
        }
    }

    fn weights(&self) -> [&Weight; 6] {
        [
            &self.proj_in,
            &self.time,
            &self.query,
            &self.text_key,
            &self.text_value,
            &self.out,
        ]
    }

    fn forward(
        &self,
        x: &FeatureMap,
        emb: &Tensor,
        cond: &DenoiseCond,
        site: usize,
        attn_scale: f64,
    ) -> Result<FeatureMap> {
        let mut h = linear(&x.data, &self.proj_in.tensor, None)?;
        let time = linear(&emb.silu()?, &self.time.tensor, None)?.unsqueeze(1)?;
        h = h.broadcast_add(&time)?;
        let q = linear(&h, &self.query.tensor, None)?;
        let k = linear(&cond.context, &self.text_key.tensor, None)?;
        let v = linear(&cond.context, &self.text_value.tensor, None)?;
        let mut attended = attention(&q, &k, &v, attn_scale)?;
        if let Some(image) = &cond.image {
            let (ik, iv) = &image.kv[site];
            let extra = attention(&q, ik, iv, attn_scale)?;
            attended = (attended + extra.affine(image.scale, 0.0)?)?;
        }
        h = (h + linear(&attended, &self.out.tensor, None)?)?;
        x.map(rms_norm_last(&h, 1e-6)?.silu()?)
    }
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let scores = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

pub struct MockBackbone {
    dims: ModelDims,
    schedule: NoiseSchedule,
    latent_lift: Weight,
    conv_in: Weight,
    conv_out: Weight,
    blocks: Vec<Block>,
    checksum: String,
}

impl MockBackbone {
    pub fn new(dims: ModelDims) -> Self {
        let [c0, c1, c2] = dims.stage_channels;
        let d = dims.latent_channels;
        let blocks = vec![
            Block::new("down1", c0, c0, &dims),
            Block::new("down2", c0, c1, &dims),
            Block::new("down3", c1, c2, &dims),
            Block::new("up1", c2, c2, &dims),
            Block::new("up2", c2 + c1, c1, &dims),
            Block::new("up3", c1 + c0, c0, &dims),
        ];
        let mut me = Self {
            latent_lift: weight("latent_lift", 3, d),
            conv_in: weight("conv_in", d, c0),
            conv_out: weight("conv_out", c0, d),
            blocks,
            schedule: NoiseSchedule::sdxl(),
            dims,
            checksum: String::new(),
        };
        me.checksum = me.compute_checksum();
        me
    }

    /// The fixed `3 -> latent_channels` lift applied after 8x8 average pooling.
    pub fn latent_lift(&self) -> &[f32] {
        &self.latent_lift.values
    }

    fn all_weights(&self) -> Vec<&Weight> {
        let mut all = vec![&self.latent_lift, &self.conv_in, &self.conv_out];
        all.extend(self.blocks.iter().flat_map(|b| b.weights()));
        all
    }

    /// Hash of the weights as currently held in the tensors.
    fn compute_checksum(&self) -> String {
        let mut sum = Checksum::new();
        for w in self.all_weights() {
            sum.update(w.name.as_bytes());
            let live = w
                .tensor
                .flatten_all()
                .and_then(|t| t.to_vec1::<f32>())
                .expect("weights are f32");
            sum.update_f32(&live);
        }
        sum.finish()
    }

    pub fn num_weights(&self) -> usize {
        self.all_weights().iter().map(|w| w.values.len()).sum()
    }
}

/// Lowercased alphanumeric words framed by `<bos>`/`<eos>` and padded to `len`.
pub fn tokenize(text: &str, len: usize) -> Vec<String> {
    let mut tokens = vec!["<bos>".to_string()];
    tokens.extend(
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(len.saturating_sub(2))
            .map(str::to_string),
    );
    tokens.push("<eos>".to_string());
    tokens.resize(len, "<pad>".to_string());
    tokens
}

pub fn token_row(token: &str, width: usize) -> Vec<f32> {
    gaussian(stable_hash(&[b"mock-text-token", token.as_bytes()]), width, 1.0)
}

impl Backbone for MockBackbone {
    fn dims(&self) -> &ModelDims {
        &self.dims
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_factor(&self) -> usize {
        LATENT_FACTOR
    }

    fn encode_latent(&self, images: &Tensor) -> Result<FeatureMap> {
        let (b, h, w, c) = images.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected RGB images, got {c} channels")));
        }
        crate::imaging::check_latent_size(w, h, LATENT_FACTOR)?;
        let pixels = FeatureMap::new(images.reshape((b, h * w, 3))?, h, w)?;
        let pooled = avg_pool(&pixels, LATENT_FACTOR)?;
        pooled.map(linear(&pooled.data, &self.latent_lift.tensor, None)?)
    }

    fn encode_text(&self, text: &str) -> Result<Tensor> {
        let (len, width) = (self.dims.text_len, self.dims.text_dim_l);
        let mut rows = Vec::with_capacity(len * width);
        for token in tokenize(text, len) {
            rows.extend(token_row(&token, width));
        }
        Ok(Tensor::from_vec(rows, (len, width), &Device::Cpu)?)
    }

    fn attention_sites(&self) -> Vec<AttentionSite> {
        HookPoint::ALL
            .iter()
            .zip(&self.blocks)
            .map(|(&point, b)| AttentionSite {
                point,
                channels: b.channels,
            })
            .collect()
    }

    fn denoise(
        &self,
        z_t: &FeatureMap,
        t: usize,
        cond: &DenoiseCond,
        hooks: &mut dyn BlockHooks,
    ) -> Result<FeatureMap> {
        self.schedule.alpha_bar(t)?;
        let dims = &self.dims;
        let b = z_t.batch();
        if z_t.channels() != dims.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} channels, backbone expects {}",
                z_t.channels(),
                dims.latent_channels
            )));
        }
        if z_t.h % 4 != 0 || z_t.w % 4 != 0 {
            return Err(Error::BadImageSize {
                width: z_t.w * LATENT_FACTOR,
                height: z_t.h * LATENT_FACTOR,
                reason: "image sides must be multiples of 32".into(),
            });
        }
        cond.validate(b, dims, self.blocks.len())?;

        let emb = timestep_embedding(t, dims.text_dim_g)?.broadcast_add(&cond.pooled)?;
        let scale = 1.0 / (dims.attn_dim as f64).sqrt();
        let [d1, d2, d3, u1, u2, u3] = [0, 1, 2, 3, 4, 5].map(|i| &self.blocks[i]);

        let x = z_t.map(linear(&z_t.data, &self.conv_in.tensor, None)?)?;
        let f1d = hooks.on_block(HookPoint::Down1, d1.forward(&x, &emb, cond, 0, scale)?)?;
        let f2d = hooks.on_block(
            HookPoint::Down2,
            d2.forward(&avg_pool(&f1d, 2)?, &emb, cond, 1, scale)?,
        )?;
        let f3d = hooks.on_block(
            HookPoint::Down3,
            d3.forward(&avg_pool(&f2d, 2)?, &emb, cond, 2, scale)?,
        )?;
        let f1u = hooks.on_block(HookPoint::Up1, u1.forward(&f3d, &emb, cond, 3, scale)?)?;
        let up = upsample2(&f1u)?;
        let cat = up.map(Tensor::cat(&[&up.data, &f2d.data], 2)?)?;
        let f2u = hooks.on_block(HookPoint::Up2, u2.forward(&cat, &emb, cond, 4, scale)?)?;
        let up = upsample2(&f2u)?;
        let cat = up.map(Tensor::cat(&[&up.data, &f1d.data], 2)?)?;
        let f3u = hooks.on_block(HookPoint::Up3, u3.forward(&cat, &emb, cond, 5, scale)?)?;
        f3u.map(linear(&f3u.data, &self.conv_out.tensor, None)?)
    }

    fn checksum(&self) -> String {
        self.compute_checksum()
    }
}
