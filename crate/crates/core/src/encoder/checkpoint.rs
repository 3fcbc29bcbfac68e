//! Versioned binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "C3LRCKPT"
//! 8       4     format version, u32 little endian
//! 12      8     header length H, u64 little endian
//! 20      H     UTF-8 JSON header: {"meta": <free-form>, "tensors": [{name, dtype, shape, offset, len}]}
//! 20+H    ...   tensor payloads, little endian, at the header offsets
//! ```
//!
//! Tensors are stored as raw little-endian bytes, so a save/load round trip is
//! bit exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderError;

pub const MAGIC: &[u8; 8] = b"C3LRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(dtype: &str, bytes: &[u8]) -> Result<Self, EncoderError> {
        let chunks = |w: usize| -> Result<std::slice::ChunksExact<'_, u8>, EncoderError> {
            if bytes.len() % w != 0 {
                return Err(EncoderError::Checkpoint(format!("{dtype} payload of {} bytes is misaligned", bytes.len())));
            }
            Ok(bytes.chunks_exact(w))
        };
        Ok(match dtype {
            "f32" => TensorData::F32(chunks(4)?.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            "f64" => TensorData::F64(chunks(8)?.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            "u64" => TensorData::U64(chunks(8)?.map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            other => return Err(EncoderError::Checkpoint(format!("unknown dtype {other}"))),
        })
    }

    /// Values as `T`, when the stored dtype is exactly `T`.
    pub fn as_scalars<T: crate::tensor::Scalar>(&self) -> Option<Vec<T>> {
        let mut bytes = Vec::new();
        if self.dtype() != T::DTYPE {
            return None;
        }
        self.write(&mut bytes);
        Some(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    pub fn from_scalars<T: crate::tensor::Scalar>(values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
        values.iter().for_each(|v| v.write_le(&mut bytes));
        TensorData::read(T::DTYPE, &bytes).expect("dtype known")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor, EncoderError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| EncoderError::Checkpoint(format!("tensor {name} missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len() as u64;
            t.data.write(&mut payload);
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype().into(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len() as u64,
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(EncoderError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| EncoderError::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                _ => 8,
            };
            let start = e.offset as usize;
            let end = start + e.len as usize * width;
            if end > payload.len() {
                return Err(EncoderError::Checkpoint(format!("tensor {} truncated", e.name)));
            }
            let data = TensorData::read(&e.dtype, &payload[start..end])?;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let io = |e: std::io::Error| EncoderError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = fs::read(path).map_err(|e| EncoderError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}
