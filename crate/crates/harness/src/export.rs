//! Embedding dumps for external projection and plotting tools: a tensor
//! blob of features plus a CSV of labels, row for row.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use cmtr::data::{Benchmark, BenchmarkConfig};
use cmtr::eval::{FeatureExtractor, ModelExtractor};
use cmtr::model::{Cmtr, Image};
use cmtr::numerics::{read_tensor, write_tensor, Tensor};
use cmtr::training::Trainer;
use cmtr::{CmtrError, Result, Scalar};
use serde::{Deserialize, Serialize};

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LABELS_FILE: &str = "embeddings.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportSplit {
    Train,
    Query,
    Gallery,
    /// Query then gallery, the evaluator's test pool.
    Test,
}

impl FromStr for ExportSplit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(ExportSplit::Train),
            "query" => Ok(ExportSplit::Query),
            "gallery" => Ok(ExportSplit::Gallery),
            "test" => Ok(ExportSplit::Test),
            _ => Err(format!("unknown split {:?}; expected train, query, gallery or test", s)),
        }
    }
}

impl ExportSplit {
    pub fn images(self, bench: &Benchmark) -> Vec<&Image> {
        match self {
            ExportSplit::Train => bench.train.images.iter().collect(),
            ExportSplit::Query => bench.query.images.iter().collect(),
            ExportSplit::Gallery => bench.gallery.images.iter().collect(),
            ExportSplit::Test => bench.test_images(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingLabel {
    pub row: usize,
    pub identity: usize,
    pub modality: String,
}

/// Rejects a checkpoint whose model cannot consume the benchmark images.
pub fn check_compatible<T: Scalar>(trainer: &Trainer<T>, b: &BenchmarkConfig) -> Result<()> {
    let m = &trainer.cfg.model;
    if (m.img_h, m.img_w) != (b.img_h, b.img_w) {
        return Err(CmtrError::Contract(format!(
            "checkpoint expects {}x{} images, benchmark has {}x{}",
            m.img_h, m.img_w, b.img_h, b.img_w
        )));
    }
    if m.num_ids != b.train_ids {
        return Err(CmtrError::Contract(format!(
            "checkpoint classifies {} identities, benchmark trains {}",
            m.num_ids, b.train_ids
        )));
    }
    Ok(())
}

/// Extracts post-neck features of `images` and writes the dump into `dir`.
/// Returns the features.
pub fn export_embeddings<T: Scalar>(
    model: &Cmtr<T>,
    store: &cmtr::numerics::ParamStore<T>,
    images: &[&Image],
    dir: &Path,
) -> Result<Vec<Vec<f64>>>
where
    Cmtr<T>: Sync,
{
    let features = ModelExtractor::new(model, store).extract(images)?;
    let d = features.first().map_or(0, Vec::len);
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(EMBEDDINGS_FILE))?);
    write_tensor(&mut w, &Tensor::new([features.len(), d], flat)?)?;
    w.flush()?;
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE)).map_err(|e| CmtrError::Format(e.to_string()))?;
    for (row, img) in images.iter().enumerate() {
        labels
            .serialize(EmbeddingLabel { row, identity: img.identity, modality: img.modality.to_string() })
            .map_err(|e| CmtrError::Format(e.to_string()))?;
    }
    labels.flush()?;
    Ok(features)
}

pub fn read_embeddings(dir: &Path) -> Result<(Tensor<f64>, Vec<EmbeddingLabel>)> {
    let tensor = read_tensor(&mut BufReader::new(File::open(dir.join(EMBEDDINGS_FILE))?))?;
    let mut rd = csv::Reader::from_path(dir.join(LABELS_FILE)).map_err(|e| CmtrError::Format(e.to_string()))?;
    let labels: Vec<EmbeddingLabel> =
        rd.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| CmtrError::Format(e.to_string()))?;
    if tensor.shape().first() != Some(&labels.len()) {
        return Err(CmtrError::Format(format!("{} labels for embeddings of shape {:?}", labels.len(), tensor.shape())));
    }
    Ok((tensor, labels))
}
