use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::losses::BatchLabels;
use crate::model::ModalityTag;

/// `q` identities with `k` images each, half visible and half infrared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub q: usize,
    pub k: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { q: 8, k: 8 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.q >= 2, "batch needs at least 2 identities so every anchor has a negative");
        ensure!(self.k >= 2 && self.k % 2 == 0, "k must be even and >= 2, got {}", self.k);
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.q * self.k
    }

    pub fn per_modality(&self) -> usize {
        self.k / 2
    }
}

/// Dataset positions of one sampled batch with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub labels: BatchLabels,
}

/// Image indices grouped by identity and modality, in dataset order.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    groups: BTreeMap<usize, [Vec<usize>; 2]>,
}

impl IdentityIndex {
    pub fn new(dataset: &Dataset) -> Self {
        let mut groups: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, img) in dataset.images.iter().enumerate() {
            groups.entry(img.identity).or_default()[img.modality.index()].push(i);
        }
        IdentityIndex { groups }
    }

    pub fn identities(&self) -> Vec<usize> {
        self.groups.keys().copied().collect()
    }

    pub fn images(&self, identity: usize, modality: ModalityTag) -> &[usize] {
        self.groups.get(&identity).map_or(&[], |g| &g[modality.index()])
    }
}

/// Samples `q` identities without replacement, then `k/2` images of each
/// modality per identity without replacement. Within an identity the
/// visible images come first, then the infrared ones.
pub fn sample_batch<R: Rng>(index: &IdentityIndex, spec: &BatchSpec, rng: &mut R) -> Result<LabeledBatch> {
    spec.validate()?;
    let ids = index.identities();
    ensure!(ids.len() >= spec.q, "dataset has {} identities, batch needs {}", ids.len(), spec.q);
    let chosen: Vec<usize> = ids.choose_multiple(rng, spec.q).copied().collect();
    let half = spec.per_modality();
    let mut indices = Vec::with_capacity(spec.batch_size());
    let mut labels = BatchLabels { ids: Vec::with_capacity(spec.batch_size()), modalities: Vec::with_capacity(spec.batch_size()) };
    for id in chosen {
        for m in ModalityTag::ALL {
            let pool = index.images(id, m);
            ensure!(pool.len() >= half, "identity {} has {} {} images, batch needs {}", id, pool.len(), m, half);
            for &i in pool.choose_multiple(rng, half) {
                indices.push(i);
                labels.ids.push(id);
                labels.modalities.push(m);
            }
        }
    }
    Ok(LabeledBatch { indices, labels })
}
