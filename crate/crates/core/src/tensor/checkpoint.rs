//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "PREDCKPT"
//! version     u32      1
//! header_len  u64
//! header      JSON     {dtype, epoch, optimizer_step, meta, tensors: [{name, role, shape, offset, len}]}
//! payload     raw little-endian floats, tensors back to back at their offsets
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, Result, Scalar, TensorError};

const MAGIC: &[u8; 8] = b"PREDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor<T: Scalar> {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub epoch: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<CheckpointTensor<T>>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    epoch: u64,
    optimizer_step: u64,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    role: TensorRole,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn corrupt(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensors_with_role(&self, role: TensorRole) -> impl Iterator<Item = &CheckpointTensor<T>> {
        self.tensors.iter().filter(move |t| t.role == role)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if numel(&t.shape) != t.data.len() {
                return Err(corrupt(format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len())));
            }
            entries.push(Entry {
                name: t.name.clone(),
                role: t.role,
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += t.data.len() * T::BYTES;
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            epoch: self.epoch,
            optimizer_step: self.optimizer_step,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            t.data.iter().for_each(|v| v.write_le(&mut out));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| corrupt(e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!("checkpoint holds {} but {} was requested", header.dtype, T::DTYPE)));
        }
        let payload = &bytes[payload_start..];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let end = e.offset + e.len * T::BYTES;
                if end > payload.len() || numel(&e.shape) != e.len {
                    return Err(corrupt(format!("tensor {} out of bounds", e.name)));
                }
                let data = payload[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
                Ok(CheckpointTensor {
                    name: e.name,
                    role: e.role,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            epoch: header.epoch,
            optimizer_step: header.optimizer_step,
            tensors,
            meta: header.meta,
        })
    }

    /// Writes through a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 0..40), epoch in 0u64..1000) {
            let n = values.len();
            let ck = Checkpoint {
                epoch,
                optimizer_step: epoch * 3,
                tensors: vec![
                    CheckpointTensor { name: "w".into(), role: TensorRole::Param, shape: vec![n], data: values.clone() },
                    CheckpointTensor { name: "w".into(), role: TensorRole::AdamM, shape: vec![1, n], data: values },
                ],
                meta: serde_json::json!({"author": "x"}),
            };
            let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_wrong_dtype_and_garbage() {
        let ck = Checkpoint::<f64> {
            epoch: 1,
            optimizer_step: 0,
            tensors: vec![],
            meta: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"nonsense").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
