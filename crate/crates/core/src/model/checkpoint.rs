//! Self-describing binary checkpoints.
//!
//! Layout: the magic `TPNT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (model configuration plus the name, role and
//! shape of every array), the arrays as little-endian `f64` in header order,
//! and finally a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, TempPNet};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TPNT";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    arrays: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint_bytes(model: &TempPNet) -> Result<Vec<u8>, ModelError> {
    let tagged = model
        .params
        .iter()
        .map(|(k, t)| (k, Role::Param, t))
        .chain(model.buffers.iter().map(|(k, t)| (k, Role::Buffer, t)));
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, role, t) in tagged {
        arrays.push(Entry {
            name: name.clone(),
            role,
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        arrays,
    })
    .map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<TempPNet, ModelError> {
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(corrupt("file is truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch: file is truncated or corrupted"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut cursor = header_end;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let end = cursor + 8 * n;
        if end > body.len() {
            return Err(corrupt(format!("array `{}` runs past the end of the file", entry.name)));
        }
        let data = body[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        let t = Tensor::new(entry.shape, data)?;
        match entry.role {
            Role::Param => params.insert(entry.name, t),
            Role::Buffer => buffers.insert(entry.name, t),
        };
    }
    if cursor != body.len() {
        return Err(corrupt("trailing bytes after the last array"));
    }
    let reference = TempPNet::new(header.config.clone(), 0)?;
    for (stored, expected) in [(&params, &reference.params), (&buffers, &reference.buffers)] {
        let shapes = |m: &BTreeMap<String, Tensor>| m.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        if shapes(stored) != shapes(expected) {
            return Err(corrupt("stored arrays do not match the stored configuration"));
        }
    }
    Ok(TempPNet {
        config: header.config,
        params,
        buffers,
    })
}

pub fn save_checkpoint(model: &TempPNet, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, write_checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TempPNet, ModelError> {
    read_checkpoint_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String, ModelError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
