//! Named registry of trainable tensors.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Checksum;

/// Whether decoupled weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decay {
    Apply,
    /// Scale-type scalars (fusion logits, temperature) are exempt.
    Exempt,
}

pub struct Param {
    pub var: Var,
    pub decay: Decay,
    pub trainable: bool,
}

/// Host copy of a parameter: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            values: t.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            self.shape.as_slice(),
            &Device::Cpu,
        )?)
    }
}

#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        values: Vec<f32>,
        shape: &[usize],
        decay: Decay,
    ) -> Result<Var> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateId(name));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &Device::Cpu)?)?;
        self.entries.insert(
            name,
            Param {
                var: var.clone(),
                decay,
                trainable: true,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.entries
            .get(name)
            .map(|p| &p.var)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter().filter(|(_, p)| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.var.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Blob>> {
        self.entries
            .iter()
            .map(|(k, p)| Ok((k.clone(), Blob::from_tensor(p.var.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `blobs`; names and shapes must match exactly.
    pub fn restore(&self, blobs: &BTreeMap<String, Blob>) -> Result<()> {
        if blobs.len() != self.entries.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                blobs.len()
            )));
        }
        for (name, param) in &self.entries {
            let blob = blobs
                .get(name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing parameter {name}")))?;
            if blob.shape != param.var.dims() {
                return Err(Error::CheckpointCorrupt(format!(
                    "{name}: shape {:?} != {:?}",
                    blob.shape,
                    param.var.dims()
                )));
            }
            param.var.set(&blob.to_tensor()?)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        let mut sum = Checksum::new();
        for (name, p) in &self.entries {
            sum.update(name.as_bytes());
            sum.update_f32(&p.var.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(sum.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_restore_round_trip() {
        let mut store = ParamStore::new();
        store
            .insert("a", vec![1.0, 2.0, 3.0, 4.0], &[2, 2], Decay::Apply)
            .unwrap();
        store.insert("b", vec![0.5], &[1], Decay::Exempt).unwrap();
        let snap = store.snapshot().unwrap();
        store
            .var("a")
            .unwrap()
            .set(&Tensor::zeros((2, 2), candle_core::DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        store.restore(&snap).unwrap();
        assert_eq!(store.snapshot().unwrap(), snap);
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let mut store = ParamStore::new();
        store.insert("a", vec![1.0], &[1], Decay::Apply).unwrap();
        assert!(matches!(
            store.insert("a", vec![1.0], &[1], Decay::Apply),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            store.insert("c", vec![1.0], &[2], Decay::Apply),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
