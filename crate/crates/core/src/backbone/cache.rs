//! On-disk feature cache: one blob per (item, timestep, conditioning hash).
//!
//! Layout, little-endian: magic `SBFC`, u32 version, u32 dtype (0 = f32),
//! six `(batch, h, w, channels)` u32 tuples, then the six maps' f32 values.

use std::fs;
use std::path::PathBuf;

use candle_core::{Device, Tensor};

use super::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::util::sha256_hex;

pub const CACHE_MAGIC: &[u8; 4] = b"SBFC";
pub const CACHE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, item_id: &str, t: usize, cond_hash: &str) -> PathBuf {
        let key = sha256_hex(format!("{item_id}\0{t}\0{cond_hash}").as_bytes());
        self.dir.join(format!("{key}.bin"))
    }

    pub fn get(&self, item_id: &str, t: usize, cond_hash: &str) -> Result<Option<MultiScaleFeatures>> {
        let path = self.path_for(item_id, t, cond_hash);
        match fs::read(&path) {
            Ok(bytes) => decode(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io_at(&path, e)),
        }
    }

    pub fn put(&self, item_id: &str, t: usize, cond_hash: &str, features: &MultiScaleFeatures) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io_at(&self.dir, e))?;
        let path = self.path_for(item_id, t, cond_hash);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode(features)?).map_err(|e| Error::io_at(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io_at(&path, e))
    }
}

pub fn encode(features: &MultiScaleFeatures) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    if features.maps.len() != 6 {
        return Err(Error::HookMismatch(format!("{} maps", features.maps.len())));
    }
    for m in &features.maps {
        for v in [m.batch(), m.h, m.w, m.channels()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for m in &features.maps {
        for v in m.data.flatten_all()?.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<MultiScaleFeatures> {
    let corrupt = |why: &str| Error::CacheCorrupt(why.to_string());
    let header = 12 + 6 * 16;
    if bytes.len() < header || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CACHE_VERSION as usize || word(8) != DTYPE_F32 as usize {
        return Err(corrupt("unsupported version or dtype"));
    }
    let shapes: Vec<[usize; 4]> = (0..6)
        .map(|k| std::array::from_fn(|j| word(12 + k * 16 + j * 4)))
        .collect();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != header + total * 4 {
        return Err(corrupt("payload length does not match header"));
    }
    let mut offset = header;
    let mut maps = Vec::with_capacity(6);
    for [b, h, w, c] in shapes {
        let n = b * h * w * c;
        let values: Vec<f32> = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|x| f32::from_le_bytes(x.try_into().unwrap()))
            .collect();
        offset += n * 4;
        maps.push(FeatureMap::new(
            Tensor::from_vec(values, (b, h * w, c), &Device::Cpu)?,
            h,
            w,
        )?);
    }
    Ok(MultiScaleFeatures { maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultiScaleFeatures {
        let maps = (0..6)
            .map(|k| {
                let v: Vec<f32> = (0..8).map(|i| (i * k) as f32 * 0.25).collect();
                FeatureMap::new(Tensor::from_vec(v, (1, 4, 2), &Device::Cpu).unwrap(), 2, 2).unwrap()
            })
            .collect();
        MultiScaleFeatures { maps }
    }

    #[test]
    fn round_trip_and_miss() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(tmp.path());
        assert!(cache.get("a", 220, "h").unwrap().is_none());
        cache.put("a", 220, "h", &sample()).unwrap();
        let back = cache.get("a", 220, "h").unwrap().unwrap();
        for (x, y) in back.maps.iter().zip(&sample().maps) {
            assert_eq!(x.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.data.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        assert!(cache.get("a", 221, "h").unwrap().is_none());
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::CacheCorrupt(_))));
    }
}
