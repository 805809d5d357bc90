//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8 JSON
//! manifest, then the payload: every tensor's little-endian scalars
//! concatenated in manifest order.
//!
//! ```text
//! { "format_version": 1,
//!   "config": { ... },
//!   "tensors": [ { "name", "dtype", "shape", "byte_offset", "byte_len" }, ... ],
//!   "content_hash": "<16 hex digits, FNV-1a over the payload>" }
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(with = "super::hex_u64")]
    pub content_hash: u64,
}

pub fn save_checkpoint<T: Scalar>(params: &ParameterSet<T>) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let bytes = t.to_le_bytes();
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            byte_offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: super::FORMAT_VERSION,
        config: params.config.clone(),
        tensors,
        content_hash: fnv1a(&payload),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its manifest and payload, checking structure and hash.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Malformed("checkpoint shorter than its length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8usize
        .checked_add(usize::try_from(header_len).map_err(|_| Error::Malformed("header too large".into()))?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Malformed("truncated manifest".into()))?;
    let header = &bytes[8..header_end];
    super::peek_version(header)?;
    let manifest: Manifest = serde_json::from_slice(header)
        .map_err(|e| Error::Malformed(format!("bad manifest: {e}")))?;
    let payload = &bytes[header_end..];

    if manifest.tensors.is_empty() {
        return Err(Error::Malformed("manifest lists no tensors".into()));
    }
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        if t.byte_offset != expected_offset {
            return Err(Error::Malformed(format!(
                "tensor {} starts at {}, expected {expected_offset}",
                t.name, t.byte_offset
            )));
        }
        let numel = t.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let want = numel.and_then(|n| n.checked_mul(t.dtype.size_of() as u64));
        if want != Some(t.byte_len) {
            return Err(Error::Malformed(format!(
                "tensor {} byte_len {} does not match shape {:?}",
                t.name, t.byte_len, t.shape
            )));
        }
        expected_offset = expected_offset
            .checked_add(t.byte_len)
            .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    }
    if (payload.len() as u64) < expected_offset {
        return Err(Error::Malformed(format!(
            "truncated payload: {} bytes, manifest needs {expected_offset}",
            payload.len()
        )));
    }
    if payload.len() as u64 > expected_offset {
        return Err(Error::Malformed("trailing bytes after payload".into()));
    }
    let actual = fnv1a(payload);
    if actual != manifest.content_hash {
        return Err(Error::HashMismatch {
            expected: manifest.content_hash,
            actual,
        });
    }
    Ok((manifest, payload))
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParameterSet<T>> {
    let (manifest, payload) = read_manifest(bytes)?;
    manifest.config.validate()?;
    let layout = ParameterSet::<T>::expected_layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Malformed(format!(
            "config implies {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&manifest.tensors) {
        if &entry.name != name || entry.shape != shape {
            return Err(Error::Malformed(format!(
                "expected tensor {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
        if entry.dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                expected: T::DTYPE.to_string(),
                found: entry.dtype.to_string(),
            });
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        tensors.push(Tensor::from_le_bytes(entry.shape.clone(), &payload[start..end])?);
    }
    let n = manifest.config.n_layers;
    let mut it = tensors.into_iter();
    let embed = it.next().expect("embed");
    let mut up = Vec::with_capacity(n);
    let mut down = Vec::with_capacity(n);
    for _ in 0..n {
        up.push(it.next().expect("up"));
        down.push(it.next().expect("down"));
    }
    let head = it.next().expect("head");
    Ok(ParameterSet {
        config: manifest.config,
        embed,
        up,
        down,
        head,
    })
}
