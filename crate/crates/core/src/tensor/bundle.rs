//! On-disk tensor bundles: a `manifest.json` next to raw little-endian `f32` blobs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_BLOB: &str = "tensors.bin";
const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

/// Named tensors in insertion order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Tensor)>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::ManifestParse(format!("duplicate tensor name '{name}'")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bitwise equality of every tensor, in order.
    pub fn bitwise_eq(&self, other: &TensorBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }
}

impl FromIterator<(String, Tensor)> for TensorBundle {
    /// Later duplicates are dropped.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut bundle = TensorBundle::new();
        for (name, tensor) in iter {
            let _ = bundle.insert(name, tensor);
        }
        bundle
    }
}

/// Writes `bundle` into directory `dir` as a manifest plus a single blob.
pub fn write_bundle(bundle: &TensorBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(bundle.len());
    for (name, tensor) in bundle.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: DTYPE_F32.to_string(),
            file: DEFAULT_BLOB.to_string(),
            byte_offset: blob.len() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_path = dir.join(DEFAULT_BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;

    let manifest = Manifest { tensors };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::ManifestParse(e.to_string()))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

/// Reads the bundle stored in directory `dir`.
pub fn read_bundle(dir: &Path) -> Result<TensorBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut bundle = TensorBundle::new();
    for entry in manifest.tensors {
        if entry.dtype != DTYPE_F32 {
            return Err(Error::ManifestParse(format!(
                "tensor '{}' has unsupported dtype '{}'",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.shape.contains(&0) {
            return Err(Error::ManifestParse(format!(
                "tensor '{}' has a zero extent in shape {:?}",
                entry.name, entry.shape
            )));
        }
        if !blobs.contains_key(&entry.file) {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let bytes = &blobs[&entry.file];
        let start = entry.byte_offset;
        let end = start + 4 * numel as u64;
        if end > bytes.len() as u64 {
            return Err(Error::BlobSizeMismatch {
                name: entry.name,
                file: PathBuf::from(entry.file),
                start,
                end,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bundle.insert(entry.name, Tensor::new(entry.shape, data)?)?;
    }
    Ok(bundle)
}
