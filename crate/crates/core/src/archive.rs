//! Tensor archive: the safetensors layout (8-byte little-endian header
//! length, JSON header mapping tensor names to dtype/shape/byte offsets,
//! then raw little-endian data). String metadata rides in the header's
//! `__metadata__` table. All tensors are stored as float32.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Result, SddError};

#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| SddError::Load {
            tensor: name.to_string(),
            reason: "missing from archive".into(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| SddError::Load {
                        tensor: name.clone(),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let metadata: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let metadata = if metadata.is_empty() { None } else { Some(metadata) };
        safetensors::serialize(views, metadata).map_err(|e| SddError::Load {
            tensor: "<archive>".into(),
            reason: e.to_string(),
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| SddError::Load {
            tensor: "<header>".into(),
            reason: e.to_string(),
        })?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| SddError::Load {
            tensor: "<header>".into(),
            reason: e.to_string(),
        })?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(SddError::Load {
                    tensor: name,
                    reason: format!("expected F32, found {:?}", view.dtype()),
                });
            }
            let data = view.data();
            if data.len() % 4 != 0 {
                return Err(SddError::Load {
                    tensor: name,
                    reason: "byte length not a multiple of 4".into(),
                });
            }
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), device)?;
            tensors.insert(name, t);
        }
        let metadata = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| SddError::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SddError::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

/// SHA-256 over names, shapes and float32 bytes, in name order.
pub fn tensors_digest<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dev = Device::Cpu;
        let mut a = TensorArchive::new();
        a.insert("w", Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.25]], &dev).unwrap());
        a.metadata.insert("mean".into(), "[0.5,0.5,0.5]".into());
        let bytes = a.to_bytes().unwrap();
        let b = TensorArchive::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(b.metadata.get("mean").unwrap(), "[0.5,0.5,0.5]");
        let x: Vec<u32> = b.get("w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            .into_iter().map(f32::to_bits).collect();
        let y: Vec<u32> = a.get("w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            .into_iter().map(f32::to_bits).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dev = Device::Cpu;
        let mut a = TensorArchive::new();
        a.insert("w", Tensor::zeros((4, 4), DType::F32, &dev).unwrap());
        let bytes = a.to_bytes().unwrap();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 3], &dev).is_err());
    }
}
