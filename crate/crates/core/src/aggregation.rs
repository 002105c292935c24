//! Per-scale adapters, softmax-weighted scale fusion, cross-view pooling,
//! and the on-disk embedding store.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::MultiScaleFeatures;
use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{group_norm, l2_normalize_rows, linear, softmax_last, FeatureMap};
use crate::params::{Decay, ParamStore};
use crate::util::{gaussian, normalize_in_place, stable_hash};

pub const FUSION_ALPHA: &str = "agg.fusion_alpha";
pub const RES_BLOCKS: usize = 3;

pub struct ResBlock {
    pub norm1: (Tensor, Tensor),
    pub conv1: (Tensor, Tensor),
    pub norm2: (Tensor, Tensor),
    pub conv2: (Tensor, Tensor),
}

pub struct ScaleAdapter {
    pub proj: Tensor,
    pub proj_bias: Tensor,
    pub blocks: Vec<ResBlock>,
    pub groups: usize,
}

fn name(scale: usize, part: &str) -> String {
    format!("agg.{scale}.{part}")
}

pub fn register_params(store: &mut ParamStore, dims: &ModelDims, seed: u64) -> Result<()> {
    let d = dims.embed_dim;
    let s = |n: &str| stable_hash(&[&seed.to_le_bytes(), n.as_bytes()]);
    for (k, &c) in dims.hook_channels().iter().enumerate() {
        let n = name(k, "proj");
        store.insert(&n, gaussian(s(&n), c * d, 1.0 / (c as f32).sqrt()), &[c, d], Decay::Apply)?;
        store.insert(name(k, "proj_bias"), vec![0.0; d], &[d], Decay::Apply)?;
        for r in 0..RES_BLOCKS {
            for half in [1, 2] {
                store.insert(name(k, &format!("res{r}.norm{half}.gamma")), vec![1.0; d], &[d], Decay::Apply)?;
                store.insert(name(k, &format!("res{r}.norm{half}.beta")), vec![0.0; d], &[d], Decay::Apply)?;
                let n = name(k, &format!("res{r}.conv{half}.weight"));
                store.insert(&n, gaussian(s(&n), d * d, 1.0 / (d as f32).sqrt()), &[d, d], Decay::Apply)?;
                store.insert(name(k, &format!("res{r}.conv{half}.bias")), vec![0.0; d], &[d], Decay::Apply)?;
            }
        }
    }
    store.insert(FUSION_ALPHA, vec![0.0; 6], &[6], Decay::Exempt)?;
    Ok(())
}

impl ScaleAdapter {
    pub fn from_store(store: &ParamStore, scale: usize, groups: usize) -> Result<Self> {
        let t = |part: String| -> Result<Tensor> { Ok(store.var(&name(scale, &part))?.as_tensor().clone()) };
        let blocks = (0..RES_BLOCKS)
            .map(|r| {
                Ok(ResBlock {
                    norm1: (t(format!("res{r}.norm1.gamma"))?, t(format!("res{r}.norm1.beta"))?),
                    conv1: (t(format!("res{r}.conv1.weight"))?, t(format!("res{r}.conv1.bias"))?),
                    norm2: (t(format!("res{r}.norm2.gamma"))?, t(format!("res{r}.norm2.beta"))?),
                    conv2: (t(format!("res{r}.conv2.weight"))?, t(format!("res{r}.conv2.bias"))?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            proj: t("proj".into())?,
            proj_bias: t("proj_bias".into())?,
            blocks,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.proj.dims()[0]
    }

    /// Projects to the embedding width, refines, and max-pools over positions: `(B, D)`.
    pub fn forward(&self, map: &FeatureMap) -> Result<Tensor> {
        if map.channels() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "adapter expects {} channels, map has {}",
                self.in_channels(),
                map.channels()
            )));
        }
        let mut h = linear(&map.data, &self.proj, Some(&self.proj_bias))?;
        for b in &self.blocks {
            let r = group_norm(&h, self.groups, &b.norm1.0, &b.norm1.1, 1e-5)?.silu()?;
            let r = linear(&r, &b.conv1.0, Some(&b.conv1.1))?;
            let r = group_norm(&r, self.groups, &b.norm2.0, &b.norm2.1, 1e-5)?.silu()?;
            let r = linear(&r, &b.conv2.0, Some(&b.conv2.1))?;
            h = (h + r)?;
        }
        Ok(h.max(1)?)
    }
}

/// Softmax of the fusion logits.
pub fn fusion_weights(alpha: &Tensor) -> Result<Tensor> {
    softmax_last(alpha)
}

/// Weighted sum of six `(B, D)` scale vectors with `softmax(alpha)` weights.
pub fn fuse_scales(vectors: &[Tensor], alpha: &Tensor) -> Result<Tensor> {
    if vectors.len() != 6 || alpha.dims() != [6] {
        return Err(Error::CountMismatch(format!(
            "fusion needs six scale vectors and six logits, got {} and {:?}",
            vectors.len(),
            alpha.dims()
        )));
    }
    let w = fusion_weights(alpha)?;
    let stacked = Tensor::stack(vectors, 1)?;
    let (b, _, d) = stacked.dims3()?;
    let w = w.reshape((1, 6, 1))?.broadcast_as((b, 6, d))?;
    Ok((stacked * w)?.sum(1)?)
}

/// Pre-normalization fused vectors `(B, D)` for a batch of multi-scale features.
pub fn aggregate(features: &MultiScaleFeatures, store: &ParamStore, dims: &ModelDims) -> Result<Tensor> {
    if features.maps.len() != 6 {
        return Err(Error::CountMismatch(format!("{} feature maps", features.maps.len())));
    }
    let vectors = features
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| ScaleAdapter::from_store(store, k, dims.norm_groups)?.forward(m))
        .collect::<Result<Vec<_>>>()?;
    fuse_scales(&vectors, store.var(FUSION_ALPHA)?.as_tensor())
}

/// Unit-length embeddings `(B, D)`.
pub fn embed(features: &MultiScaleFeatures, store: &ParamStore, dims: &ModelDims) -> Result<Tensor> {
    l2_normalize_rows(&aggregate(features, store, dims)?)
}

/// Elementwise max over view vectors, then L2 normalization.
pub fn pool_views(views: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = views
        .first()
        .ok_or_else(|| Error::EmptyViewSet("no views to pool".into()))?;
    let mut pooled = first.clone();
    for v in &views[1..] {
        if v.len() != pooled.len() {
            return Err(Error::ShapeMismatch("view vectors differ in width".into()));
        }
        for (p, x) in pooled.iter_mut().zip(v) {
            *p = p.max(*x);
        }
    }
    normalize_in_place(&mut pooled);
    Ok(pooled)
}

/// Differentiable pooling of `(S, V, D)` pre-normalization view vectors into `(S, D)` unit rows.
pub fn pool_views_tensor(views: &Tensor) -> Result<Tensor> {
    if views.dims3()?.1 == 0 {
        return Err(Error::EmptyViewSet("no views to pool".into()));
    }
    l2_normalize_rows(&views.max(1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Sketch,
    Shape,
    View,
}

/// Unit-row embeddings with ids and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub ids: Vec<String>,
    pub labels: Vec<Option<String>>,
    pub matrix: Vec<f32>,
}

pub const STORE_MAGIC: &[u8; 4] = b"SBEM";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    kind: EmbeddingKind,
    count: usize,
    dim: usize,
    checksum: String,
    #[serde(default)]
    meta: serde_json::Value,
}

impl EmbeddingSet {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            ids: Vec::new(),
            labels: Vec::new(),
            matrix: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: String, label: Option<String>, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} for store of width {}",
                vector.len(),
                self.dim
            )));
        }
        self.ids.push(id);
        self.labels.push(label);
        self.matrix.extend_from_slice(vector);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.matrix.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(match self.kind {
            EmbeddingKind::Sketch => 0,
            EmbeddingKind::Shape => 1,
            EmbeddingKind::View => 2,
        });
        let put_str = |s: &str, out: &mut Vec<u8>| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for (id, label) in self.ids.iter().zip(&self.labels) {
            put_str(id, &mut out);
            match label {
                Some(l) => {
                    out.push(1);
                    put_str(l, &mut out);
                }
                None => out.push(0),
            }
        }
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::CheckpointCorrupt("embedding store: bad magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::CheckpointCorrupt(format!("embedding store version {version}")));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let dim = r.u32()? as usize;
        let kind = match r.take(1)?[0] {
            0 => EmbeddingKind::Sketch,
            1 => EmbeddingKind::Shape,
            2 => EmbeddingKind::View,
            k => return Err(Error::CheckpointCorrupt(format!("embedding kind {k}"))),
        };
        let mut set = Self::new(kind, dim);
        for _ in 0..count {
            let id = r.string()?;
            let label = match r.take(1)?[0] {
                0 => None,
                _ => Some(r.string()?),
            };
            set.ids.push(id);
            set.labels.push(label);
        }
        let payload = r.take(count * dim * 4)?;
        set.matrix = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt("embedding store: trailing bytes".into()));
        }
        Ok(set)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the binary store and a JSON sidecar carrying `meta`.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let bytes = self.to_bytes();
        let sidecar = Sidecar {
            version: STORE_VERSION,
            kind: self.kind,
            count: self.len(),
            dim: self.dim,
            checksum: crate::util::sha256_hex(&bytes),
            meta,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io_at(path, e))?;
        let side = Self::sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io_at(&side, e))?;
        Ok(())
    }

    /// Loads the store and returns the sidecar's `meta` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        let set = Self::from_bytes(&bytes)?;
        let side = Self::sidecar_path(path);
        let meta = match fs::read_to_string(&side) {
            Ok(text) => {
                let sidecar: Sidecar = serde_json::from_str(&text)?;
                if sidecar.checksum != crate::util::sha256_hex(&bytes) {
                    return Err(Error::CheckpointCorrupt(format!(
                        "{} does not match its sidecar checksum",
                        path.display()
                    )));
                }
                sidecar.meta
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Value::Null,
            Err(e) => return Err(Error::io_at(&side, e)),
        };
        Ok((set, meta))
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.matrix.clone(), (self.len(), self.dim), &Device::Cpu)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt("embedding store truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("embedding store: non-utf8 id".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn t2(v: Vec<Vec<f32>>) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn ln2_alpha_weights() {
        let alpha = Tensor::new(&[2f32.ln(), 0.0, 0.0, 0.0, 0.0, 0.0], &Device::Cpu).unwrap();
        let w = fusion_weights(&alpha).unwrap().to_vec1::<f32>().unwrap();
        assert!((w[0] - 2.0 / 7.0).abs() < 1e-6);
        assert!(w[1..].iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-6));
    }

    #[test]
    fn uniform_fusion_is_mean() {
        let vs: Vec<Tensor> = (0..6).map(|k| t2(vec![vec![k as f32, 1.0]])).collect();
        let alpha = Tensor::zeros(6, DType::F32, &Device::Cpu).unwrap();
        let f = fuse_scales(&vs, &alpha).unwrap().to_vec2::<f32>().unwrap();
        assert!((f[0][0] - 2.5).abs() < 1e-6 && (f[0][1] - 1.0).abs() < 1e-6);
        assert!(matches!(fuse_scales(&vs[..5], &alpha), Err(Error::CountMismatch(_))));
    }

    #[test]
    fn pooling_is_elementwise_max() {
        let p = pool_views(&[vec![1.0, -2.0, 0.0], vec![0.0, 5.0, -1.0]]).unwrap();
        let n = 26f32.sqrt();
        assert!((p[0] - 1.0 / n).abs() < 1e-6 && (p[1] - 5.0 / n).abs() < 1e-6 && p[2] == 0.0);
        assert!(matches!(pool_views(&[]), Err(Error::EmptyViewSet(_))));
    }

    proptest::proptest! {
        #[test]
        fn fusion_weights_lie_on_the_simplex(alpha in proptest::collection::vec(-30.0f32..30.0, 6)) {
            let w = fusion_weights(&Tensor::new(alpha.as_slice(), &Device::Cpu).unwrap()).unwrap().to_vec1::<f32>().unwrap();
            proptest::prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
            proptest::prop_assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }

        #[test]
        fn pooling_ignores_view_order(
            views in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 8), 1..6),
            rot in 0usize..6,
        ) {
            let mut turned = views.clone();
            turned.rotate_left(rot % views.len());
            turned.reverse();
            proptest::prop_assert_eq!(pool_views(&views).unwrap(), pool_views(&turned).unwrap());
            let t = |v: &[Vec<f32>]| Tensor::new(v.to_vec(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
            let a = pool_views_tensor(&t(&views)).unwrap().to_vec2::<f32>().unwrap();
            let b = pool_views_tensor(&t(&turned)).unwrap().to_vec2::<f32>().unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hand_set_projection() {
        // 2x2 map with two channels; projection swaps and doubles channels
        let map = FeatureMap::new(
            Tensor::new(&[[[1f32, 2.0], [3.0, -1.0], [0.0, 4.0], [-2.0, 0.5]]], &Device::Cpu).unwrap(),
            2,
            2,
        )
        .unwrap();
        let zero = || Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
        let zb = || Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        let ones = || Tensor::ones(2, DType::F32, &Device::Cpu).unwrap();
        let adapter = ScaleAdapter {
            proj: t2(vec![vec![0.0, 2.0], vec![2.0, 0.0]]),
            proj_bias: zb(),
            blocks: (0..3)
                .map(|_| ResBlock {
                    norm1: (ones(), zb()),
                    conv1: (zero(), zb()),
                    norm2: (ones(), zb()),
                    conv2: (zero(), zb()),
                })
                .collect(),
            groups: 1,
        };
        let out = adapter.forward(&map).unwrap().to_vec2::<f32>().unwrap();
        // channel 0 = 2 * max(c1) = 8, channel 1 = 2 * max(c0) = 6
        assert_eq!(out[0], vec![8.0, 6.0]);
    }

    #[test]
    fn store_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("index.bin");
        let mut set = EmbeddingSet::new(EmbeddingKind::Shape, 2);
        set.push("a/1".into(), Some("a".into()), &[0.6, 0.8]).unwrap();
        set.push("b/1".into(), None, &[1.0, 0.0]).unwrap();
        set.save(&path, serde_json::json!({"manifest_hash": "x"})).unwrap();
        let (back, meta) = EmbeddingSet::load(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(meta["manifest_hash"], "x");
        let bytes = set.to_bytes();
        assert!(EmbeddingSet::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
