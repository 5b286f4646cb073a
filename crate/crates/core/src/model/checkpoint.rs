//! Versioned binary parameter files.
//!
//! Layout: `b"MCAKDCKP"`, `u32` format version, `u32` header length, a JSON
//! header, then every tensor's values back to back in little-endian order.

use super::{ModelConfig, ModelState, Role};
use crate::error::{Error, Result};
use crate::linalg::Real;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MCAKDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

/// JSON header of a parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub config_fingerprint: Option<String>,
    /// Free-form extra metadata (e.g. CA-KS instance settings).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn write_container<S: Real>(
    path: &Path,
    mut header: CheckpointHeader,
    tensors: &[(String, &[S])],
) -> Result<()> {
    header.dtype = S::DTYPE.to_string();
    header.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            len: t.len(),
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + total * S::BYTES);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for &x in t.iter() {
            x.write_le(&mut bytes);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a container, converting stored values to `S`.
pub(crate) fn read_container<S: Real>(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<S>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a parameter file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            8,
            format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::format(bytes.len() as u64, "header truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::format(16, format!("header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(16, format!("unknown dtype {other}"))),
    };
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let expected = payload_start + total * width;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("payload is {} bytes, header describes {}", bytes.len() - payload_start, total * width),
        ));
    }
    let mut offset = payload_start;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let mut v = Vec::with_capacity(t.len);
        for i in 0..t.len {
            let chunk = &bytes[offset + i * width..offset + (i + 1) * width];
            v.push(if width == S::BYTES {
                S::read_le(chunk)
            } else if width == 4 {
                S::lit(f32::read_le(chunk) as f64)
            } else {
                S::lit(f64::read_le(chunk))
            });
        }
        offset += t.len * width;
        out.push(v);
    }
    Ok((header, out))
}

pub fn save_checkpoint<S: Real>(
    state: &ModelState<S>,
    path: impl AsRef<Path>,
    config_fingerprint: Option<&str>,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: "model".into(),
        dtype: String::new(),
        role: Some(state.role),
        config: Some(state.config.clone()),
        config_fingerprint: config_fingerprint.map(str::to_string),
        extra: serde_json::Value::Null,
        tensors: Vec::new(),
    };
    write_container(path.as_ref(), header, &state.tensors())
}

pub fn load_checkpoint<S: Real>(path: impl AsRef<Path>) -> Result<(ModelState<S>, CheckpointHeader)> {
    let (header, values) = read_container::<S>(path.as_ref())?;
    if header.kind != "model" {
        return Err(Error::format(16, format!("expected a model checkpoint, found {}", header.kind)));
    }
    let config = header
        .config
        .clone()
        .ok_or_else(|| Error::format(16, "checkpoint header lacks a model config"))?;
    let role = header.role.unwrap_or(Role::Student);
    let mut state = ModelState::<S>::init(&config, role, 0)?;
    {
        let expected = state.tensors();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|((name, t), e)| *name != e.name || t.len() != e.len)
        {
            return Err(Error::format(16, "tensor layout does not match the stored config"));
        }
    }
    for (dst, src) in state.tensors_mut().into_iter().zip(values) {
        dst.copy_from_slice(&src);
    }
    Ok((state, header))
}

/// Hex SHA-256 of a file's bytes.
pub fn checkpoint_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
