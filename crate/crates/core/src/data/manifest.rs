//! On-disk datasets: a JSON-lines manifest with one record per image plus
//! one tensor blob (`[3, H, W]`) per image under `images/`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{CmtrError, Result};
use crate::model::{Image, ModalityTag, CHANNELS};
use crate::numerics::{read_tensor, write_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Blob path relative to the dataset directory.
    pub path: String,
    pub identity: usize,
    pub modality: ModalityTag,
    pub split: Split,
}

/// Writes every split into `dir`, replacing an existing manifest.
pub fn write_datasets(dir: &Path, datasets: &[&Dataset]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for ds in datasets {
        for (i, img) in ds.images.iter().enumerate() {
            let rel = format!("images/{}_{:05}.bin", ds.split.as_str(), i);
            let t: Tensor<f64> = img.to_tensor();
            let mut w = BufWriter::new(File::create(dir.join(&rel))?);
            write_tensor(&mut w, &t)?;
            w.flush()?;
            let rec = ManifestRecord { path: rel, identity: img.identity, modality: img.modality, split: ds.split };
            serde_json::to_writer(&mut manifest, &rec).map_err(|e| CmtrError::Format(e.to_string()))?;
            manifest.write_all(b"\n")?;
        }
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(File::open(dir.join(MANIFEST_FILE))?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CmtrError::Format(format!("manifest line {}: {}", n + 1, e)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads the images of one split in manifest order.
pub fn read_split(dir: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    for rec in read_manifest(dir)?.into_iter().filter(|r| r.split == split) {
        let t: Tensor<f64> = read_tensor(&mut BufReader::new(File::open(dir.join(&rec.path))?))?;
        let s = t.shape().to_vec();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(CmtrError::Format(format!("{}: expected [3, H, W] image, got {:?}", rec.path, s)));
        }
        images.push(Image::new(s[1], s[2], t.into_data(), rec.modality, rec.identity)?);
    }
    Ok(Dataset { split, images })
}
