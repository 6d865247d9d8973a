//! Checkpoint container.
//!
//! Layout (little-endian):
//! `b"CMTRCKPT"`, `u32` version, `u32` manifest length, manifest TOML bytes,
//! `u32` entry count, then per entry `u32` name length, UTF-8 name and a
//! tensor blob as written by [`write_tensor`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmtrError, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{read_tensor, write_tensor, Tensor};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CMTRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    /// Free-form provenance and resume state (epoch, step, RNG positions, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig) -> Self {
        Checkpoint { manifest: CheckpointManifest { model, meta: BTreeMap::new() }, entries: Vec::new() }
    }

    /// Stores the values only; gradient state is not persisted.
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut v: Tensor<f64> = t.cast();
        v.requires_grad = false;
        v.grad = None;
        self.entries.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.manifest.meta.get(key).map(|s| s.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.manifest.meta.insert(key.to_string(), value.to_string());
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = toml::to_string(&self.manifest).map_err(|e| CmtrError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CmtrError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CmtrError::Format(format!("unsupported checkpoint version {}", version)));
        }
        let manifest = String::from_utf8(read_bytes(r)?).map_err(|e| CmtrError::Format(e.to_string()))?;
        let manifest: CheckpointManifest = toml::from_str(&manifest).map_err(|e| CmtrError::Format(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|e| CmtrError::Format(e.to_string()))?;
            entries.push((name, read_tensor(r)?));
        }
        Ok(Checkpoint { manifest, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_manifest_and_tensors() {
        let mut ck = Checkpoint::new(ModelConfig::default());
        ck.set_meta("epoch", 3);
        ck.push("a", &Tensor::<f64>::new([2], vec![0.1, -7.5]).unwrap());
        ck.push("b", &Tensor::<f32>::full([1, 3], 2.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("epoch"), Some("3"));
        assert_eq!(back.manifest.model.patch.stride, 4);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(CmtrError::Format(_))));
    }
}
