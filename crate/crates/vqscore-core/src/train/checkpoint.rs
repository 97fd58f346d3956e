//! Versioned binary checkpoints holding parameters and optimizer state.
//!
//! Layout: 8-byte magic, format version (u32 LE), header length (u32 LE),
//! JSON header, raw little-endian f32 payload, CRC-32 of the payload
//! (u32 LE). The header carries the model configuration, the optimizer step
//! counter, and a map of tensor name to dtype/shape/offset/length.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::AdamState;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"VQSCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (magic mismatch)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("payload checksum mismatch; file is corrupt")]
    ChecksumMismatch,
    #[error("tensor '{0}' missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor '{name}': checkpoint shape {found:?}, this configuration needs {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Byte length within the payload.
    len: usize,
}

/// Tensor names in payload order: parameters in canonical order, then the
/// optimizer's first and second moments under `adam.m.` / `adam.v.`.
fn tensor_names(params: &ModelParams<f32>) -> Vec<String> {
    let mut base = Vec::with_capacity(params.tensor_count());
    params.visit(|n, _| base.push(n));
    let mut all = base.clone();
    all.extend(base.iter().map(|n| format!("adam.m.{n}")));
    all.extend(base.iter().map(|n| format!("adam.v.{n}")));
    all
}

fn append_tensor(
    name: String,
    t: &Tensor<f32>,
    payload: &mut Vec<u8>,
    entries: &mut BTreeMap<String, TensorEntry>,
) {
    let offset = payload.len();
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    entries.insert(
        name,
        TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() - offset,
        },
    );
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    state: &AdamState<f32>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut base_names = Vec::with_capacity(params.tensor_count());
    params.visit(|n, _| base_names.push(n));

    let mut payload = Vec::new();
    let mut entries = BTreeMap::new();
    params.visit(|name, t| append_tensor(name, t, &mut payload, &mut entries));
    for (name, t) in base_names.iter().zip(&state.m) {
        append_tensor(format!("adam.m.{name}"), t, &mut payload, &mut entries);
    }
    for (name, t) in base_names.iter().zip(&state.v) {
        append_tensor(format!("adam.v.{name}"), t, &mut payload, &mut entries);
    }

    let header = Header {
        meta: Meta {
            config: params.config.clone(),
            adam_step: state.step,
        },
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out =
        Vec::with_capacity(16 + header_bytes.len() + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelParams<f32>, AdamState<f32>), CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(
        bytes[bytes.len() - 4..].try_into().expect("4 bytes"),
    );
    if crc32(payload) != stored_crc {
        return Err(CheckpointError::ChecksumMismatch);
    }

    header.meta.config.validate()?;
    let mut params = ModelParams::<f32>::zeros(header.meta.config.clone())?;
    let names = tensor_names(&params);
    if header.tensors.len() != names.len() {
        let unknown: Vec<&String> = header
            .tensors
            .keys()
            .filter(|k| !names.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(CheckpointError::Invalid(format!(
                "unexpected tensors {unknown:?}"
            )));
        }
    }

    let read_into = |name: &str, t: &mut Tensor<f32>| -> Result<(), CheckpointError> {
        let entry = header
            .tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        if entry.dtype != "f32" {
            return Err(CheckpointError::Invalid(format!(
                "tensor '{name}' has dtype '{}'",
                entry.dtype
            )));
        }
        if entry.shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected: t.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.len != t.numel() * 4 {
            return Err(CheckpointError::Invalid(format!(
                "tensor '{name}' length {} disagrees with shape {:?}",
                entry.len, entry.shape
            )));
        }
        let end = entry.offset.checked_add(entry.len);
        let Some(end) = end.filter(|&e| e <= payload.len()) else {
            return Err(CheckpointError::Truncated);
        };
        for (dst, src) in t
            .data_mut()
            .iter_mut()
            .zip(payload[entry.offset..end].chunks_exact(4))
        {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
        Ok(())
    };

    let mut result = Ok(());
    params.visit_mut(|name, t| {
        if result.is_ok() {
            result = read_into(&name, t);
        }
    });
    result?;

    let mut base_names = Vec::with_capacity(params.tensor_count());
    params.visit(|n, _| base_names.push(n));
    let mut state = AdamState::new(&params);
    state.step = header.meta.adam_step;
    for (buf, prefix) in [(&mut state.m, "adam.m."), (&mut state.v, "adam.v.")] {
        for (name, t) in base_names.iter().zip(buf.iter_mut()) {
            read_into(&format!("{prefix}{name}"), t)?;
        }
    }
    Ok((params, state))
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = u32::MAX;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ u32::MAX
}
