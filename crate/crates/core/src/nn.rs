//! Small differentiable building blocks on top of candle tensors.
//!
//! Feature maps are kept channels-last and spatially flattened,
//! `(batch, h * w, channels)`, so every 1x1 convolution is a matmul.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// A channels-last, spatially flattened feature map `(batch, h * w, channels)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, h: usize, w: usize) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[1] != h * w {
            return Err(Error::ShapeMismatch(format!(
                "feature map {dims:?} does not hold a {h}x{w} grid"
            )));
        }
        Ok(Self { data, h, w })
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[2]
    }

    /// `(h, w, channels)` of one item.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.channels())
    }

    pub fn map(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.h, self.w)
    }
}

/// `x @ w + b` over the last axis of `x`, for any number of leading axes.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims();
    let in_dim = *dims.last().expect("linear input has rank >= 1");
    let (w_in, w_out) = w.dims2()?;
    if w_in != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "linear: input width {in_dim}, weight {w_in}x{w_out}"
        )));
    }
    let rows = x.elem_count() / in_dim;
    let mut out = x.reshape((rows, in_dim))?.matmul(w)?;
    if let Some(b) = b {
        out = out.broadcast_add(b)?;
    }
    let mut out_dims = dims.to_vec();
    *out_dims.last_mut().unwrap() = w_out;
    Ok(out.reshape(out_dims)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn rms_norm_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Group normalization of `(batch, positions, channels)` with per-channel affine.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (b, p, c) = x.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "group norm: {c} channels not divisible into {groups} groups"
        )));
    }
    let g = x.reshape((b, p, groups, c / groups))?;
    let mean = g.mean_keepdim(3)?.mean_keepdim(1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
    let normed = centered
        .broadcast_div(&(var + eps)?.sqrt()?)?
        .reshape((b, p, c))?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Average pooling with a square window equal to the stride.
pub fn avg_pool(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if map.h % factor != 0 || map.w % factor != 0 {
        return Err(Error::BadImageSize {
            width: map.w,
            height: map.h,
            reason: format!("not divisible by pooling factor {factor}"),
        });
    }
    let (b, c) = (map.batch(), map.channels());
    let (h, w) = (map.h / factor, map.w / factor);
    let pooled = map
        .data
        .reshape((b, h, factor, w, factor, c))?
        .sum_keepdim(4)?
        .sum_keepdim(2)?
        .reshape((b, h * w, c))?
        .affine(1.0 / (factor * factor) as f64, 0.0)?;
    FeatureMap::new(pooled, h, w)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(map: &FeatureMap) -> Result<FeatureMap> {
    let (b, c) = (map.batch(), map.channels());
    let (h, w) = (map.h, map.w);
    let up = map
        .data
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 4 * h * w, c))?;
    FeatureMap::new(up, 2 * h, 2 * w)
}

/// 1-D bilinear interpolation weights, `(out, in)` row-major, half-pixel centers.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of every channel to `(out_h, out_w)`.
pub fn resize_bilinear(map: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if (out_h, out_w) == (map.h, map.w) {
        return Ok(map.clone());
    }
    let rh = bilinear_weights(map.h, out_h);
    let rw = bilinear_weights(map.w, out_w);
    let (hw_in, hw_out) = (map.h * map.w, out_h * out_w);
    let mut kron = vec![0f32; hw_out * hw_in];
    for oh in 0..out_h {
        for ow in 0..out_w {
            let row = (oh * out_w + ow) * hw_in;
            for ih in 0..map.h {
                let a = rh[oh * map.h + ih];
                if a == 0.0 {
                    continue;
                }
                for iw in 0..map.w {
                    kron[row + ih * map.w + iw] = a * rw[ow * map.w + iw];
                }
            }
        }
    }
    let k = Tensor::from_vec(kron, (hw_out, hw_in), map.data.device())?;
    let (b, c) = (map.batch(), map.channels());
    let flat = map
        .data
        .transpose(0, 1)?
        .contiguous()?
        .reshape((hw_in, b * c))?;
    let out = k
        .matmul(&flat)?
        .reshape((hw_out, b, c))?
        .transpose(0, 1)?
        .contiguous()?;
    FeatureMap::new(out, out_h, out_w)
}

/// Sinusoidal timestep embedding, cosine half first.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = arg.cos() as f32;
        v[half + i] = arg.sin() as f32;
    }
    Ok(Tensor::from_vec(v, (1, dim), &Device::Cpu)?)
}

/// Row-wise L2 normalization of a `(n, d)` matrix.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?[0])
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(scalar(&t.sum_all()?)?.is_finite())
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    scalar(&(a - b)?.abs()?.flatten_all()?.max(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f32>, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(
            Tensor::from_vec(values, (1, h * w, c), &Device::Cpu).unwrap(),
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn bilinear_two_to_four_matches_half_pixel_rule() {
        let m = bilinear_weights(2, 4);
        let expect = [1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0];
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_preserves_constant_maps() {
        let m = map(vec![3.0; 9 * 2], 3, 3, 2);
        let r = resize_bilinear(&m, 7, 5).unwrap();
        let v = r.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (x - 3.0).abs() < 1e-6));
        assert_eq!(r.shape(), (7, 5, 2));
    }

    #[test]
    fn avg_pool_and_upsample() {
        let m = map((0..16).map(|x| x as f32).collect(), 4, 4, 1);
        let p = avg_pool(&m, 2).unwrap();
        let v = p.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p).unwrap();
        let v = u.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..4], &[2.5, 2.5, 4.5, 4.5]);
        assert_eq!(u.shape(), (4, 4, 1));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
