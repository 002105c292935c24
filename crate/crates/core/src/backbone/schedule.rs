use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::util::gaussian;

pub const DEFAULT_TIMESTEP: usize = 220;

/// Cumulative signal retention `alpha_bar[t]` for `t in 0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in sqrt-space between `beta_start` and `beta_end`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "steps={steps}, betas {beta_start}..{beta_end}"
            )));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let r = a + (b - a) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - r * r;
                acc
            })
            .collect();
        Ok(Self { alphas_cumprod })
    }

    /// The 1000-step schedule of SDXL-family backbones.
    pub fn sdxl() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("static schedule is valid")
    }

    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::InvalidSchedule("empty schedule".into()));
        }
        if alphas_cumprod.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidSchedule("alpha_bar outside [0, 1]".into()));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidSchedule("alpha_bar must be non-increasing".into()));
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(Error::InvalidTimestep { t, len: self.len() })
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

/// Standard-normal noise for one item, fully determined by `seed`.
pub fn noise(seed: u64, len: usize) -> Vec<f32> {
    gaussian(seed, len, 1.0)
}

pub fn add_noise_scalar(z0: f64, eps: f64, alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
}

/// Forward diffusion of a `(B, ...)` latent batch; item `i` draws its noise from `seeds[i]`.
pub fn add_noise(z0: &Tensor, t: usize, seeds: &[u64], schedule: &NoiseSchedule) -> Result<Tensor> {
    let alpha_bar = schedule.alpha_bar(t)?;
    let batch = z0.dims()[0];
    if seeds.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} noise seeds for batch of {batch}",
            seeds.len()
        )));
    }
    let per_item = z0.elem_count() / batch.max(1);
    let mut eps = Vec::with_capacity(z0.elem_count());
    for &seed in seeds {
        eps.extend(noise(seed, per_item));
    }
    let eps = Tensor::from_vec(eps, z0.shape(), &Device::Cpu)?;
    add_noise_with(z0, &eps, alpha_bar)
}

pub fn add_noise_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let signal = z0.affine(alpha_bar.sqrt(), 0.0)?;
    let noise = eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?;
    Ok((signal + noise)?)
}
