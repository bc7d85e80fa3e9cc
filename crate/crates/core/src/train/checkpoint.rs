//! Checkpoints: `manifest.json` plus one little-endian f32 blob.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};
use crate::network::{AttentionMode, Model, NetConfig};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";
const FORMAT: &str = "lungscore-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub net: NetConfig,
    /// Completed training stages, in order.
    pub stages: Vec<Stage>,
    pub attention: Option<AttentionMode>,
    /// Free-form snapshot of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub stages: Vec<Stage>,
    pub attention: Option<AttentionMode>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            stages: Vec::new(),
            attention: None,
            config: serde_json::Value::Null,
        }
    }

    pub fn has_stage(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    /// Weights in little-endian f32, in parameter order, and their manifest.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let ps = &self.model.params;
        let mut blob = Vec::with_capacity(ps.numel() * 4);
        let mut entries = Vec::with_capacity(ps.len());
        for id in ps.ids() {
            let t = ps.tensor(id);
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: ps.name(id).to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            net: self.model.config.clone(),
            stages: self.stages.clone(),
            attention: self.attention,
            config: self.config.clone(),
            blob: BLOB.into(),
            entries,
        };
        (manifest, blob)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let bp = dir.join(BLOB);
        fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        let mp = dir.join(MANIFEST);
        fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| corrupt(&mp, "manifest", e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(corrupt(
                &mp,
                "format",
                format!("unsupported format `{}`", manifest.format),
            ));
        }
        if manifest.blob.contains(['/', '\\']) || manifest.blob.is_empty() {
            return Err(corrupt(&mp, "blob", "blob must be a bare file name".into()));
        }
        let bp = dir.join(&manifest.blob);
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        Self::decode(manifest, &blob, &mp)
    }

    fn decode(manifest: Manifest, blob: &[u8], path: &Path) -> Result<Self> {
        let mut model =
            Model::new(manifest.net.clone(), 0).map_err(|e| corrupt(path, "net", e.to_string()))?;
        let mut seen = HashSet::new();
        let mut expected_end = 0;
        for e in &manifest.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(corrupt(path, &e.name, "listed more than once".into()));
            }
            let Some(id) = model.params.find(&e.name) else {
                return Err(corrupt(
                    path,
                    &e.name,
                    "not a parameter of this network".into(),
                ));
            };
            let t = model.params.tensor_mut(id);
            if e.dtype != "f32" {
                return Err(corrupt(path, &e.name, format!("dtype `{}`", e.dtype)));
            }
            if e.shape != t.shape() {
                return Err(corrupt(
                    path,
                    &e.name,
                    format!("shape {:?}, network expects {:?}", e.shape, t.shape()),
                ));
            }
            if e.length != t.len() * 4 || e.offset != expected_end {
                return Err(corrupt(
                    path,
                    &e.name,
                    format!("offset {} / length {} inconsistent", e.offset, e.length),
                ));
            }
            let Some(bytes) = blob.get(e.offset..e.offset + e.length) else {
                return Err(corrupt(
                    path,
                    &e.name,
                    format!("blob truncated at {} bytes", blob.len()),
                ));
            };
            for (v, b) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            expected_end += e.length;
        }
        if let Some(id) = model
            .params
            .ids()
            .find(|&id| !seen.contains(model.params.name(id)))
        {
            return Err(corrupt(
                path,
                model.params.name(id),
                "missing from manifest".into(),
            ));
        }
        if blob.len() != expected_end {
            return Err(corrupt(
                path,
                "blob",
                format!("{} bytes, manifest covers {expected_end}", blob.len()),
            ));
        }
        model
            .params
            .validate()
            .map_err(|e| corrupt(path, "values", e.to_string()))?;
        Ok(Self {
            model,
            stages: manifest.stages,
            attention: manifest.attention,
            config: manifest.config,
        })
    }
}

fn corrupt(path: &Path, entry: &str, reason: String) -> Error {
    Error::Corrupt {
        path: PathBuf::from(path),
        entry: entry.to_string(),
        reason,
    }
}
