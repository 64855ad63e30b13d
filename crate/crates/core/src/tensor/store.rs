use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TResult, Tensor, TensorError};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: Vec<ManifestEntry>,
}

fn ck(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Writes `<stem>.bin` (little-endian `f64`) and `<stem>.json` (manifest).
    pub fn save(&self, dir: &Path, stem: &str) -> TResult<()> {
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let manifest = Manifest {
            format: "f64-le".into(),
            entries,
        };
        std::fs::write(dir.join(format!("{stem}.bin")), bytes).map_err(|e| ck(e.to_string()))?;
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| ck(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), json).map_err(|e| ck(e.to_string()))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path, stem: &str) -> TResult<Self> {
        let json = std::fs::read_to_string(dir.join(format!("{stem}.json"))).map_err(|e| ck(e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&json).map_err(|e| ck(e.to_string()))?;
        if manifest.format != "f64-le" {
            return Err(ck(format!("unsupported format {}", manifest.format)));
        }
        let bytes = std::fs::read(dir.join(format!("{stem}.bin"))).map_err(|e| ck(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(ck("binary length is not a multiple of 8"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.entries {
            if e.offset + e.len > values.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(ck(format!("entry {} is inconsistent with the data", e.name)));
            }
            let t = Tensor::new(e.shape, values[e.offset..e.offset + e.len].to_vec())?;
            store.add(e.name, t);
        }
        Ok(store)
    }

    /// Replaces all tensors after checking names and shapes match.
    pub fn assign_from(&mut self, other: &ParamStore) -> TResult<()> {
        if self.names != other.names {
            return Err(ck("parameter names differ"));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(ck(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 1e-300, f64::MAX]).unwrap());
        s.add("b", Tensor::scalar(0.125));
        s.save(dir.path(), "ckpt").unwrap();
        let back = ParamStore::load(dir.path(), "ckpt").unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::filled(&[3], 1.0));
        s.save(dir.path(), "c").unwrap();
        std::fs::write(dir.path().join("c.bin"), [0u8; 16]).unwrap();
        assert!(ParamStore::load(dir.path(), "c").is_err());
    }
}
