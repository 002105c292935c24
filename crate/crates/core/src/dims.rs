use serde::{Deserialize, Serialize};

/// Widths of every tensor that crosses a module boundary.
///
/// [`ModelDims::full`] is the SDXL-shaped profile; [`ModelDims::desk`] keeps
/// the same topology at a width small enough to train on a laptop CPU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Latent channels produced by the image encoder.
    pub latent_channels: usize,
    /// Channel widths of the three down stages; the up stages mirror them.
    pub stage_channels: [usize; 3],
    /// Token count of the text context.
    pub text_len: usize,
    /// Width of the first (hard prompt) text encoder.
    pub text_dim_l: usize,
    /// Width of the second text encoder, replaced by the soft prompt.
    pub text_dim_g: usize,
    /// Query/key width of every denoiser cross-attention site.
    pub attn_dim: usize,
    /// Hidden width of the vision encoder's class and patch tokens.
    pub vision_dim: usize,
    /// Side of the square patch-token grid.
    pub patch_grid: usize,
    /// Width of the shared metric space.
    pub embed_dim: usize,
    /// Number of global image tokens.
    pub t_tokens: usize,
    /// Group count of the adapter normalization layers.
    pub norm_groups: usize,
}

impl ModelDims {
    pub fn full() -> Self {
        Self {
            latent_channels: 4,
            stage_channels: [320, 640, 1280],
            text_len: 77,
            text_dim_l: 768,
            text_dim_g: 1280,
            attn_dim: 64,
            vision_dim: 1024,
            patch_grid: 16,
            embed_dim: 1280,
            t_tokens: 4,
            norm_groups: 32,
        }
    }

    pub fn desk() -> Self {
        Self {
            latent_channels: 4,
            stage_channels: [32, 64, 128],
            text_len: 77,
            text_dim_l: 32,
            text_dim_g: 64,
            attn_dim: 16,
            vision_dim: 32,
            patch_grid: 4,
            embed_dim: 128,
            t_tokens: 4,
            norm_groups: 8,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Cross-attention context width: hard-prompt rows concatenated with soft-prompt rows.
    pub fn context_dim(&self) -> usize {
        self.text_dim_l + self.text_dim_g
    }

    /// Channel signature of the six hooked maps, down stages then up stages.
    pub fn hook_channels(&self) -> [usize; 6] {
        let [a, b, c] = self.stage_channels;
        [a, b, c, c, b, a]
    }

    /// Spatial stride (relative to the input image) of the six hooked maps.
    pub fn hook_strides(&self) -> [usize; 6] {
        [8, 16, 32, 32, 16, 8]
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::full()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_matches_backbone_signature() {
        let d = ModelDims::full();
        assert_eq!(d.hook_channels(), [320, 640, 1280, 1280, 640, 320]);
        assert_eq!(d.context_dim(), 2048);
        assert_eq!(d.text_len, 77);
        assert_eq!(d.embed_dim, 1280);
    }
}
