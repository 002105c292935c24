//! Circle-T metric loss with dynamic positive scaling, the view
//! classification loss, and the weighted total objective.
//!
//! For one anchor with positive similarity `s_p` and negatives `s_n`:
//!
//! ```text
//! lambda = min(1 + beta * exp(-mean(s_n) / tau), lambda_max)
//! a_n    = gamma * relu(s_n + delta_n) * (s_n - delta_n)
//! b      = gamma * lambda * relu(2 - delta_p - s_p) * (s_p - delta_p)
//! loss   = softplus(logsumexp(a_n) - b)
//! ```

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Decay, ParamStore};
use crate::util::{gaussian, stable_hash};

pub const CLS_WEIGHT: &str = "obj.cls_weight";
pub const CLS_TEMPERATURE: &str = "obj.cls_temperature";

/// Masked logits sit this far below any real logit.
const MASKED: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleTParams {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda_max: f64,
}

impl Default for CircleTParams {
    fn default() -> Self {
        Self {
            delta_p: 0.75,
            delta_n: 0.25,
            gamma: 32.0,
            beta: 0.5,
            tau: 0.5,
            lambda_max: 2.0,
        }
    }
}

impl CircleTParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.delta_p, self.delta_n, self.gamma, self.beta, self.tau, self.lambda_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("circle-T parameters must be finite".into()));
        }
        if self.gamma <= 0.0 || self.beta < 0.0 || self.tau <= 0.0 || self.lambda_max < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "need gamma > 0, beta >= 0, tau > 0, lambda_max >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// How the positive scale factor enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaGradient {
    /// Treated as a per-instance constant.
    #[default]
    Detached,
    /// Differentiated through the mean negative similarity.
    Full,
}

pub fn dynamic_scale(mean_negative: f64, p: &CircleTParams) -> f64 {
    if p.beta == 0.0 {
        // 0 * inf would be NaN for very negative means
        return 1.0;
    }
    (1.0 + p.beta * (-mean_negative / p.tau).exp()).min(p.lambda_max)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFiniteSimilarity(v));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleTOutput {
    pub loss: f64,
    pub lambda: f64,
    pub grad_positive: f64,
    pub grad_negatives: Vec<f64>,
}

pub fn circle_t_loss(s_p: f64, s_n: &[f64], p: &CircleTParams) -> Result<f64> {
    Ok(circle_t_with_grad(s_p, s_n, p, LambdaGradient::Detached)?.loss)
}

/// Loss and its derivatives with respect to `s_p` and every `s_n`.
pub fn circle_t_with_grad(s_p: f64, s_n: &[f64], p: &CircleTParams, mode: LambdaGradient) -> Result<CircleTOutput> {
    check_finite(std::iter::once(s_p).chain(s_n.iter().copied()))?;
    if s_n.is_empty() {
        return Ok(CircleTOutput {
            loss: 0.0,
            lambda: dynamic_scale(0.0, p),
            grad_positive: 0.0,
            grad_negatives: Vec::new(),
        });
    }
    let n = s_n.len() as f64;
    let mean = s_n.iter().sum::<f64>() / n;
    let lambda = dynamic_scale(mean, p);

    let alpha_p = (2.0 - p.delta_p - s_p).max(0.0);
    let pos_margin = s_p - p.delta_p;
    let b = p.gamma * lambda * alpha_p * pos_margin;

    let logits: Vec<f64> = s_n
        .iter()
        .map(|&s| p.gamma * (s + p.delta_n).max(0.0) * (s - p.delta_n))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    let z = lse - b;
    let loss = softplus(z);

    let dz = sigmoid(z);
    let dalpha_p = if 2.0 - p.delta_p - s_p > 0.0 { -1.0 } else { 0.0 };
    let db_dsp = p.gamma * lambda * (dalpha_p * pos_margin + alpha_p);
    let grad_positive = -dz * db_dsp;

    // d lambda / d mean, zero while clamped
    let dlambda = match mode {
        LambdaGradient::Full if p.beta > 0.0 && 1.0 + p.beta * (-mean / p.tau).exp() < p.lambda_max => {
            -(p.beta / p.tau) * (-mean / p.tau).exp()
        }
        _ => 0.0,
    };
    let db_dsn = p.gamma * alpha_p * pos_margin * dlambda / n;
    let grad_negatives = s_n
        .iter()
        .zip(&exps)
        .map(|(&s, &e)| {
            let active = s + p.delta_n > 0.0;
            let da = if active {
                p.gamma * ((s - p.delta_n) + (s + p.delta_n))
            } else {
                0.0
            };
            dz * (e / total * da - db_dsn)
        })
        .collect();
    Ok(CircleTOutput {
        loss,
        lambda,
        grad_positive,
        grad_negatives,
    })
}

fn softplus_t(z: &Tensor) -> Result<Tensor> {
    let tail = z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((z.relu()? + tail)?)
}

/// Mean circle-T loss over every (anchor, positive) instance.
///
/// `anchors` `(A, D)` and `others` `(O, D)` are unit rows; an other is a
/// positive when its label equals the anchor's, a negative otherwise. Each
/// anchor's scale factor is computed from its own negatives and detached.
/// Anchors without positives are skipped.
pub fn circle_t_batch(
    anchors: &Tensor,
    anchor_labels: &[usize],
    others: &Tensor,
    other_labels: &[usize],
    p: &CircleTParams,
) -> Result<Tensor> {
    let (a, _) = anchors.dims2()?;
    let (o, _) = others.dims2()?;
    if anchor_labels.len() != a || other_labels.len() != o {
        return Err(Error::ShapeMismatch("labels do not match embedding rows".into()));
    }
    let dev = &Device::Cpu;
    let mut pos = vec![0u8; a * o];
    let mut neg_mean = vec![0f64; a];
    let sims_host = anchors.matmul(&others.t()?)?.to_vec2::<f32>()?;
    let mut instances = 0usize;
    for i in 0..a {
        let (mut sum, mut count) = (0f64, 0usize);
        let mut has_pos = false;
        for j in 0..o {
            if anchor_labels[i] == other_labels[j] {
                pos[i * o + j] = 1;
                has_pos = true;
                instances += 1;
            } else {
                sum += sims_host[i][j] as f64;
                count += 1;
            }
        }
        if !has_pos {
            log::warn!("anchor {i} has no positive in the batch; skipped");
        }
        neg_mean[i] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    if instances == 0 {
        return Ok(Tensor::new(0f32, dev)?);
    }
    let lambda: Vec<f32> = neg_mean.iter().map(|&m| dynamic_scale(m, p) as f32).collect();
    let lambda = Tensor::from_vec(lambda, (a, 1), dev)?;
    let pos_mask = Tensor::from_vec(pos.clone(), (a, o), dev)?;
    let neg_mask = Tensor::from_vec(pos.iter().map(|&x| 1 - x).collect::<Vec<u8>>(), (a, o), dev)?;

    let s = anchors.matmul(&others.t()?)?;
    let alpha_n = s.affine(1.0, p.delta_n)?.relu()?;
    let neg_logits = (alpha_n * s.affine(1.0, -p.delta_n)?)?.affine(p.gamma, 0.0)?;
    let filler = Tensor::full(MASKED as f32, (a, o), dev)?;
    let neg_logits = neg_mask.where_cond(&neg_logits, &filler)?;
    let max = neg_logits.max_keepdim(D::Minus1)?.detach();
    let lse = (neg_logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?;

    let alpha_p = s.affine(-1.0, 2.0 - p.delta_p)?.relu()?;
    let b = (alpha_p * s.affine(1.0, -p.delta_p)?)?
        .broadcast_mul(&lambda)?
        .affine(p.gamma, 0.0)?;
    let z = lse.broadcast_sub(&b)?;
    let per_pair = softplus_t(&z)?;
    let zeros = Tensor::zeros((a, o), DType::F32, dev)?;
    let total = pos_mask.where_cond(&per_pair, &zeros)?.sum_all()?;
    Ok(total.affine(1.0 / instances as f64, 0.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub circle: CircleTParams,
    pub eta: f64,
    pub cls_temperature: f32,
    pub use_ske_circle: bool,
    pub use_view_circle: bool,
    pub use_view_cls: bool,
    pub use_ske_cls: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            circle: CircleTParams::default(),
            eta: 10.0,
            cls_temperature: 10.0,
            use_ske_circle: true,
            use_view_circle: true,
            use_view_cls: true,
            use_ske_cls: false,
        }
    }
}

pub fn register_head(store: &mut ParamStore, classes: usize, dim: usize, temperature: f32, seed: u64) -> Result<()> {
    let s = stable_hash(&[&seed.to_le_bytes(), CLS_WEIGHT.as_bytes()]);
    store.insert(CLS_WEIGHT, gaussian(s, classes * dim, 0.01), &[classes, dim], Decay::Apply)?;
    store.insert(CLS_TEMPERATURE, vec![temperature], &[1], Decay::Exempt)?;
    Ok(())
}

/// Maps category names to head rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIndex {
    pub names: Vec<String>,
}

impl ClassIndex {
    pub fn index(&self, label: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// Mean cross-entropy of `softmax(temperature * F W^T)`.
pub fn view_cls_loss(embeddings: &Tensor, labels: &[usize], weight: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    let (b, _) = embeddings.dims2()?;
    let classes = weight.dims2()?.0;
    if labels.len() != b {
        return Err(Error::ShapeMismatch("labels do not match embedding rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::UnknownLabel(format!("class index {bad} of {classes}")));
    }
    let logits = embeddings.matmul(&weight.t()?)?.broadcast_mul(temperature)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), &Device::Cpu)?;
    let picked = logits.gather(&idx, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn total_loss(ske: f64, view: f64, view_cls: f64, eta: f64) -> f64 {
    ske + view + eta * view_cls
}
