//! Single-file checkpoint container.
//!
//! Layout: the 5-byte magic `DIDA1`, a little-endian `u64` manifest length,
//! the manifest as JSON (name, shape, byte offset per entry), then raw
//! little-endian `f32` payloads in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 5] = b"DIDA1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the payload, relative to the start of the payload block.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn to_bytes<T: Float>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    for (_, p) in store.iter() {
        entries.push(ManifestEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            offset: payload.len() as u64,
            trainable: p.trainable(),
        });
        for &v in p.value().data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { entries })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a container into a fresh store (entries in manifest order).
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing DIDA1 magic"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let mlen = u64::from_le_bytes(len) as usize;
    let body = &bytes[13..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
    let payload = &body[mlen..];
    let mut store = ParamStore::new();
    for e in manifest.entries {
        let count = Tensor::<T>::numel(&e.shape);
        let start = e.offset as usize;
        let end = start + 4 * count;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload of `{}` truncated", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if e.trainable {
            store.add_param(&e.name, t)?;
        } else {
            store.add_buffer(&e.name, t)?;
        }
    }
    Ok(store)
}

pub fn save<T: Float>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    from_bytes(&fs::read(path)?)
}

/// Overwrite the values of `store` from the checkpoint at `path`.
pub fn load_into<T: Float>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let loaded = load::<T>(path)?;
    store.load_from(&loaded)
}
