//! Checkpoint files: `MRC1`, a little-endian `u32` manifest length, a JSON
//! manifest naming every tensor (group, name, shape, dtype, byte offset) plus
//! free-form metadata, then one blob of little-endian `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, IoContext, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named parameter groups plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub groups: Vec<(String, ParamSet)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: impl Into<String>, params: ParamSet) -> Self {
        self.groups.push((name.into(), params));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| {
                Error::CheckpointMismatch(format!("{} checkpoint has no group {name}", self.kind))
            })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CheckpointMismatch(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (group, set) in &self.groups {
            for (name, value) in set.iter() {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: [value.nrows(), value.ncols()],
                    dtype: "f64".into(),
                    offset,
                });
                offset += value.len() * 8;
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json =
            serde_json::to_vec(&manifest).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, set) in &self.groups {
            for (_, value) in set.iter() {
                for v in value.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointMismatch(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing MRC1 header"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let blob = &bytes[8 + len..];
        let mut groups: Vec<(String, ParamSet)> = Vec::new();
        let mut expected_offset = 0;
        for t in manifest.tensors {
            if t.dtype != "f64" {
                return Err(bad(&format!("unsupported dtype {}", t.dtype)));
            }
            let count = t.shape[0] * t.shape[1];
            if t.offset != expected_offset {
                return Err(bad(&format!(
                    "tensor {} at offset {} (expected {expected_offset})",
                    t.name, t.offset
                )));
            }
            let raw = blob
                .get(t.offset..t.offset + count * 8)
                .ok_or_else(|| bad("truncated tensor data"))?;
            expected_offset += count * 8;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mat = Mat::from_shape_vec((t.shape[0], t.shape[1]), values)
                .map_err(|e| bad(&e.to_string()))?;
            match groups.last_mut() {
                Some((g, set)) if *g == t.group => {
                    set.add(t.name, mat);
                }
                _ => {
                    if groups.iter().any(|(g, _)| *g == t.group) {
                        return Err(bad(&format!("group {} is not contiguous", t.group)));
                    }
                    let mut set = ParamSet::new();
                    set.add(t.name, mat);
                    groups.push((t.group, set));
                }
            }
        }
        if expected_offset != blob.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: manifest.kind,
            metadata: manifest.metadata,
            groups,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}
