//! Versioned binary container for trained models.
//!
//! Layout: the 8-byte magic `FOSCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! payload of little-endian `f32` tensors back to back. The header records
//! each tensor's name, shape and offset plus the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FOSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    mode: Option<String>,
    schema_hash: String,
    config_hash: Option<String>,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

/// In-memory checkpoint: named f32 tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `foreground-encoder`.
    pub kind: String,
    /// Ablation mode tag for query encoders.
    pub mode: Option<String>,
    pub schema_hash: String,
    pub config_hash: Option<String>,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn payload_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

/// SHA-256 over the little-endian bytes of `values`.
pub fn tensor_checksum(values: &[f32]) -> String {
    hex::encode(Sha256::digest(payload_bytes(values.iter().copied())))
}

impl Checkpoint {
    pub fn new(kind: &str, schema_hash: &str) -> Self {
        Self {
            kind: kind.to_string(),
            mode: None,
            schema_hash: schema_hash.to_string(),
            config_hash: None,
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f32>) {
        self.tensors.insert(name.to_string(), (shape, values));
    }

    pub fn tensor(&self, name: &str) -> Result<&[f32]> {
        self.tensors
            .get(name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Missing(format!("tensor '{name}' in {} checkpoint", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, values)) in &self.tensors {
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::invalid(format!("tensor '{name}' shape {shape:?} does not match {} values", values.len())));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += values.len();
        }
        let payload = payload_bytes(self.tensors.values().flat_map(|(_, v)| v.iter().copied()));
        let header = Header {
            kind: self.kind.clone(),
            mode: self.mode.clone(),
            schema_hash: self.schema_hash.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            payload_len: offset,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::corrupt(path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() != header.payload_len * 4 {
            return Err(bad("payload length mismatch"));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(&format!("tensor '{}' out of range", e.name)))?;
            tensors.insert(e.name, (e.shape, slice.to_vec()));
        }
        Ok(Self {
            kind: header.kind,
            mode: header.mode,
            schema_hash: header.schema_hash,
            config_hash: header.config_hash,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {}", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the model family.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::corrupt(path, format!("expected a {kind} checkpoint, found {}", ck.kind)));
        }
        Ok(ck)
    }
}
