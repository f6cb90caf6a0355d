//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CAATCKPT"
//! version    u32
//! config     u32 length + UTF-8 TOML of ModelConfig
//! count      u32 number of tensors
//! manifest   per tensor: u32 name length, name, u32 rank, rank × u64 dims
//! payload    per tensor, manifest order: numel × f64
//! ```
//!
//! The manifest must match the layout implied by the embedded config
//! exactly; trailing bytes are rejected.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelWeights};

const MAGIC: &[u8; 8] = b"CAATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(w: &ModelWeights) -> Result<Vec<u8>, ModelError> {
    let config = toml::to_string(&w.config)
        .map_err(|e| ModelError::Checkpoint(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(w.store.len() as u32).to_le_bytes());
    for (name, t) in w.store.names().iter().zip(w.store.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in w.store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() < n {
            return Err(ModelError::Checkpoint(format!("truncated file while reading {what}")));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights, ModelError> {
    let mut r = Reader { bytes };
    if r.take(8, "magic")? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| ModelError::Checkpoint("config is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;

    let mut w = ModelWeights::zeroed(&config)?;
    let count = r.u32("tensor count")? as usize;
    if count != w.store.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {count} tensors, config implies {}",
            w.store.len()
        )));
    }
    for i in 0..count {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let expected_name = &w.store.names()[i];
        let expected_shape = w.store.tensors()[i].shape();
        if &name != expected_name || shape != expected_shape {
            return Err(ModelError::Checkpoint(format!(
                "manifest entry {i} is {name} {shape:?}, expected {expected_name} {expected_shape:?}"
            )));
        }
    }
    // fill a scratch copy so a short payload leaves nothing half-loaded
    let mut tensors = w.store.tensors().to_vec();
    for (i, t) in tensors.iter_mut().enumerate() {
        for v in t.data_mut() {
            *v = r.f64(&format!("payload of tensor {i}"))?;
        }
    }
    if !r.bytes.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} unexpected trailing bytes",
            r.bytes.len()
        )));
    }
    w.store.tensors_mut().clone_from_slice(&tensors);
    Ok(w)
}

pub fn save_checkpoint(w: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(w)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Names and shapes stored in a checkpoint, in order.
pub fn checkpoint_manifest(w: &ModelWeights) -> Vec<(String, Vec<usize>)> {
    w.store
        .names()
        .iter()
        .cloned()
        .zip(w.store.tensors().iter().map(|t| t.shape().to_vec()))
        .collect()
}
