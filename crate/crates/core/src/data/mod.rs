//! Synthetic two-modality datasets, augmentation, identity-balanced batch
//! sampling and an on-disk manifest format.

mod augment;
mod manifest;
mod sampler;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_seeded, erase, erase_rect, flip_horizontal, AugmentConfig};
pub use manifest::{read_manifest, read_split, write_datasets, ManifestRecord, MANIFEST_FILE};
pub use sampler::{sample_batch, BatchSpec, IdentityIndex, LabeledBatch};
pub use synth::{identity_pattern_seed, synth_generate, synth_identities, Jitter, SyntheticIdentitySpec, MIN_SIDE};

use crate::error::{ensure, Result};
use crate::model::{Image, ModalityTag, CHANNELS};

/// Mixes `parts` into `seed` (splitmix64 finaliser per step). Used to give
/// every image, trial and epoch its own independent stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for &p in parts {
        h = mix(h ^ mix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {:?}", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn count(&self, identity: usize, modality: ModalityTag) -> usize {
        self.images.iter().filter(|i| i.identity == identity && i.modality == modality).count()
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for img in &self.images {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.channel(c).iter().sum::<f64>();
            }
            n += img.height * img.width;
        }
        if n == 0 {
            return [0.0; CHANNELS];
        }
        sum.map(|s| s / n as f64)
    }

    /// Checks the training invariant: every identity has at least `k/2`
    /// images of each modality.
    pub fn validate_for(&self, spec: &BatchSpec) -> Result<()> {
        spec.validate()?;
        for id in self.identities() {
            for m in ModalityTag::ALL {
                let n = self.count(id, m);
                ensure!(n >= spec.per_modality(), "identity {} has {} {} images, need {}", id, n, m, spec.per_modality());
            }
        }
        Ok(())
    }
}

/// Toy benchmark layout: training identities `0..train_ids`, test
/// identities following them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub train_ids: usize,
    pub test_ids: usize,
    pub per_modality: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { train_ids: 20, test_ids: 10, per_modality: 12, img_h: 64, img_w: 32, seed: 0 }
    }
}

/// Train split plus the test identities divided by modality: infrared
/// images form the query split and visible images the gallery split.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        ensure!(cfg.train_ids >= 2, "benchmark needs at least 2 training identities");
        ensure!(cfg.test_ids >= 1, "benchmark needs at least 1 test identity");
        let jitter = Jitter::default();
        let train =
            synth_identities(0, cfg.train_ids, cfg.per_modality, cfg.img_h, cfg.img_w, cfg.seed, jitter, Split::Train)?;
        let test =
            synth_identities(cfg.train_ids, cfg.test_ids, cfg.per_modality, cfg.img_h, cfg.img_w, cfg.seed, jitter, Split::Query)?;
        let (query, gallery): (Vec<Image>, Vec<Image>) =
            test.images.into_iter().partition(|i| i.modality == ModalityTag::Infrared);
        Ok(Benchmark {
            train,
            query: Dataset { split: Split::Query, images: query },
            gallery: Dataset { split: Split::Gallery, images: gallery },
        })
    }

    /// All test images, query split first.
    pub fn test_images(&self) -> Vec<&Image> {
        self.query.images.iter().chain(&self.gallery.images).collect()
    }
}
