//! Checkpoint layout: `TCCTCKPT`, a little-endian u32 format version, a u64
//! manifest byte length, the JSON manifest, then every weight tensor as raw
//! little-endian f64 values at the offsets the manifest declares.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Shape;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TCCTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 3],
    /// Offset in f64 elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    /// Free-form training history (per-epoch metrics).
    pub history: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, history: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (name, t) in model.store.iter() {
        let s = t.shape();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [s.batch, s.len, s.dim],
            offset,
        });
        offset += t.numel();
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        config: model.config.clone(),
        seed: model.config.seed,
        history,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + mlen)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json)?;
    let data = &bytes[20 + mlen..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let mut model = Model::new(manifest.config.clone())?;
    if manifest.tensors.len() != model.store.len() {
        return Err(bad("tensor count does not match the configured model"));
    }
    for (id, entry) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&manifest.tensors) {
        let shape = Shape::new(entry.shape[0], entry.shape[1], entry.shape[2]);
        if model.store.name(id) != entry.name || model.store.get(id).shape() != shape {
            return Err(bad(&format!("tensor `{}` does not match the model", entry.name)));
        }
        let n = shape.numel();
        let raw = data
            .get(entry.offset * 8..(entry.offset + n) * 8)
            .ok_or_else(|| bad(&format!("tensor `{}` out of range", entry.name)))?;
        let target = model.store.get_mut(id).data_mut();
        for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok((model, manifest))
}
