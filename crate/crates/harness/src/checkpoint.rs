//! Checkpoints: a JSON manifest next to a blob of little-endian `f32`.

use std::path::{Path, PathBuf};

use cosal_core::{Model, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f32` elements.
    pub length: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub config: RunConfig,
    pub params: Vec<ParamRecord>,
}

/// Blob path for a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn ckpt_err(m: String) -> HarnessError {
    HarnessError::Checkpoint(m)
}

/// Serializes the parameter registry. Returns `(manifest bytes, blob)`.
pub fn encode(config: &RunConfig, params: &ParamStore<f32>, blob_name: &str) -> (Vec<u8>, Vec<u8>) {
    let mut blob = Vec::with_capacity(4 * params.numel());
    let mut records = Vec::with_capacity(params.len());
    for (_, name, entry) in params.iter() {
        records.push(ParamRecord {
            name: name.to_string(),
            shape: entry.value.shape().to_vec(),
            offset: blob.len(),
            length: entry.value.len(),
            frozen: entry.frozen,
        });
        for v in entry.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        blob: blob_name.to_string(),
        config: config.clone(),
        params: records,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    (text, blob)
}

pub fn save(path: &Path, config: &RunConfig, params: &ParamStore<f32>) -> Result<()> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| HarnessError::Usage(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let (manifest, blob) = encode(config, params, &blob_name);
    std::fs::write(&blob_file, blob).map_err(HarnessError::io(&blob_file))?;
    std::fs::write(path, manifest).map_err(HarnessError::io(path))?;
    Ok(())
}

/// Validates the manifest against the blob and rebuilds the model.
pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<(RunConfig, Model<f32>)> {
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| ckpt_err(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "format version {} is not the supported {FORMAT_VERSION}",
            m.format_version
        )));
    }
    if m.seed != m.config.seed {
        return Err(ckpt_err(format!("seed {} disagrees with config seed {}", m.seed, m.config.seed)));
    }
    for p in &m.params {
        let end = p.length.checked_mul(4).and_then(|b| b.checked_add(p.offset));
        match end {
            Some(end) if end <= blob.len() => {}
            _ => {
                return Err(ckpt_err(format!(
                    "entry {} (offset {}, length {}) lies outside the {}-byte blob",
                    p.name,
                    p.offset,
                    p.length,
                    blob.len()
                )))
            }
        }
        if p.shape.iter().product::<usize>() != p.length {
            return Err(ckpt_err(format!("entry {}: shape {:?} holds {} elements", p.name, p.shape, p.length)));
        }
    }
    let total: usize = m.params.iter().map(|p| p.length * 4).sum();
    if total != blob.len() {
        return Err(ckpt_err(format!("blob has {} bytes, manifest describes {total}", blob.len())));
    }
    m.config.validate().map_err(|e| ckpt_err(format!("config: {e}")))?;
    let mut model = Model::<f32>::new(&m.config.net_config(), m.config.seed)?;
    if model.params.len() != m.params.len() {
        return Err(ckpt_err(format!(
            "{} entries, the configured network has {}",
            m.params.len(),
            model.params.len()
        )));
    }
    let mut loaded = ParamStore::<f32>::new();
    for (p, (_, name, entry)) in m.params.iter().zip(model.params.iter()) {
        if p.name != name || p.shape != entry.value.shape() || p.frozen != entry.frozen {
            return Err(ckpt_err(format!(
                "entry {} {:?} does not match parameter {name} {:?}",
                p.name,
                p.shape,
                entry.value.shape()
            )));
        }
        let data = blob[p.offset..p.offset + 4 * p.length]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        loaded.register(&p.name, Tensor::new(&p.shape, data)?, p.frozen)?;
    }
    model.params.load_from(&loaded)?;
    Ok((m.config, model))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let manifest = std::fs::read(path).map_err(HarnessError::io(path))?;
    let m: Manifest = serde_json::from_slice(&manifest).map_err(|e| ckpt_err(format!("manifest: {e}")))?;
    let blob_file = path.with_file_name(&m.blob);
    let blob = std::fs::read(&blob_file).map_err(HarnessError::io(&blob_file))?;
    decode(&manifest, &blob)
}
