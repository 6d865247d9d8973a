//! Cross-modality retrieval evaluation: cosine ranking, CMC, mAP and mINP
//! under single-shot, multi-shot or full-gallery protocols.

mod metrics;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{average_precision, cmc, inverse_negative_penalty, mean_ap, mean_inp, rank_gallery, RankingList};

use crate::data::derive_seed;
use crate::error::{ensure, CmtrError, Result};
use crate::model::{Cmtr, Image, ModalityTag, NeckMode};
use crate::numerics::{ParamStore, Tape};
use crate::scalar::Scalar;

/// Cut-offs reported as Rank-k.
pub const RANKS: [usize; 3] = [1, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    /// One image per identity per camera group.
    SingleShot,
    /// `multi_shots` images per identity per camera group.
    MultiShot,
    /// Every gallery image; trials are identical.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    InfraredToVisible,
    VisibleToInfrared,
}

impl Direction {
    pub fn query_modality(self) -> ModalityTag {
        match self {
            Direction::InfraredToVisible => ModalityTag::Infrared,
            Direction::VisibleToInfrared => ModalityTag::Visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub mode: GalleryMode,
    pub multi_shots: usize,
    /// Disjoint random partitions of each identity's gallery images,
    /// standing in for cameras.
    pub camera_groups: usize,
    pub trials: usize,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mode: GalleryMode::SingleShot,
            multi_shots: 4,
            camera_groups: 2,
            trials: 10,
            seed: 0,
            direction: Direction::InfraredToVisible,
        }
    }
}

impl EvalProtocol {
    pub fn full_gallery() -> Self {
        EvalProtocol { mode: GalleryMode::Full, trials: 1, ..EvalProtocol::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.trials >= 1, "eval protocol needs at least one trial");
        ensure!(self.camera_groups >= 1, "eval protocol needs at least one camera group");
        ensure!(self.multi_shots >= 1, "multi_shots must be >= 1");
        Ok(())
    }

    fn shots(&self) -> usize {
        match self.mode {
            GalleryMode::SingleShot => 1,
            GalleryMode::MultiShot => self.multi_shots,
            GalleryMode::Full => usize::MAX,
        }
    }

    pub fn describe(&self) -> String {
        let mode = match self.mode {
            GalleryMode::SingleShot => "single_shot".to_string(),
            GalleryMode::MultiShot => format!("multi_shot({})", self.multi_shots),
            GalleryMode::Full => "full".to_string(),
        };
        let dir = match self.direction {
            Direction::InfraredToVisible => "ir->vis",
            Direction::VisibleToInfrared => "vis->ir",
        };
        format!("{} groups={} trials={} seed={} {}", mode, self.camera_groups, self.trials, self.seed, dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub minp: f64,
    pub queries: usize,
    pub skipped: usize,
}

impl TrialMetrics {
    pub fn from_rankings(rankings: &[RankingList], skipped: usize) -> Result<Self> {
        let r = cmc(rankings, &RANKS)?;
        Ok(TrialMetrics {
            rank1: r[0],
            rank10: r[1],
            rank20: r[2],
            map: mean_ap(rankings)?,
            minp: mean_inp(rankings)?,
            queries: rankings.len(),
            skipped,
        })
    }

    fn values(&self) -> [f64; 5] {
        [self.rank1, self.rank10, self.rank20, self.map, self.minp]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub checkpoint: String,
    pub trials: Vec<TrialMetrics>,
    pub mean: TrialMetrics,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    trial: String,
    rank1: f64,
    rank10: f64,
    rank20: f64,
    map: f64,
    minp: f64,
    queries: usize,
    skipped: usize,
    checkpoint: &'a str,
}

impl EvalReport {
    fn new(protocol: EvalProtocol, checkpoint: String, trials: Vec<TrialMetrics>) -> Self {
        let n = trials.len() as f64;
        let mut sums = [0.0; 5];
        for t in &trials {
            for (s, v) in sums.iter_mut().zip(t.values()) {
                *s += v;
            }
        }
        let [rank1, rank10, rank20, map, minp] = sums.map(|s| s / n);
        let mean = TrialMetrics {
            rank1,
            rank10,
            rank20,
            map,
            minp,
            queries: trials.iter().map(|t| t.queries).sum::<usize>() / trials.len(),
            skipped: trials.iter().map(|t| t.skipped).sum::<usize>() / trials.len(),
        };
        EvalReport { protocol, checkpoint, trials, mean }
    }

    /// One row per trial followed by a `MEAN` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let labels = (0..self.trials.len()).map(|i| i.to_string()).chain(["MEAN".to_string()]);
        for (label, t) in labels.zip(self.trials.iter().chain([&self.mean])) {
            out.serialize(CsvRow {
                trial: label,
                rank1: t.rank1,
                rank10: t.rank10,
                rank20: t.rank20,
                map: t.map,
                minp: t.minp,
                queries: t.queries,
                skipped: t.skipped,
                checkpoint: &self.checkpoint,
            })
            .map_err(|e| CmtrError::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint: {}", self.checkpoint);
        let _ = writeln!(s, "protocol:   {}", self.protocol.describe());
        let m = &self.mean;
        let _ = writeln!(
            s,
            "mean over {} trial(s): R1 {:.2}%  R10 {:.2}%  R20 {:.2}%  mAP {:.2}%  mINP {:.2}%",
            self.trials.len(),
            100.0 * m.rank1,
            100.0 * m.rank10,
            100.0 * m.rank20,
            100.0 * m.map,
            100.0 * m.minp
        );
        let _ = writeln!(s, "queries per trial: {} (skipped {})", m.queries, m.skipped);
        s
    }
}

/// Ranked list of one query in one trial, in a form suitable for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDump {
    pub trial: usize,
    pub query: usize,
    pub query_id: usize,
    /// Test-pool indices of the gallery, best match first.
    pub gallery: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Writes rankings as JSON lines.
pub fn write_rankings(path: impl AsRef<Path>, dumps: &[RankingDump]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in dumps {
        serde_json::to_writer(&mut w, d).map_err(|e| CmtrError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Produces one retrieval feature per image.
pub trait FeatureExtractor: Sync {
    fn extract(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;

    /// Identifier recorded in reports.
    fn checkpoint_id(&self) -> String {
        "unnamed".to_string()
    }
}

/// Post-neck features of a model in inference mode.
pub struct ModelExtractor<'a, T: Scalar> {
    pub model: &'a Cmtr<T>,
    pub store: &'a ParamStore<T>,
    pub batch_size: usize,
    /// Worker threads; batches are fixed so results do not depend on it.
    pub jobs: usize,
    pub id: String,
}

impl<'a, T: Scalar> ModelExtractor<'a, T> {
    pub fn new(model: &'a Cmtr<T>, store: &'a ParamStore<T>) -> Self {
        ModelExtractor { model, store, batch_size: 64, jobs: 1, id: "model".to_string() }
    }

    fn extract_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pv = self.store.bind_frozen(&mut tape);
        let out = self.model.forward(&mut tape, &pv, images, NeckMode::Inference)?;
        let d = tape.shape(out.f)[1];
        Ok(tape.data(out.f).chunks(d).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }
}

impl<T: Scalar> FeatureExtractor for ModelExtractor<'_, T>
where
    Cmtr<T>: Sync,
{
    fn extract(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        let batches: Vec<&[&Image]> = images.chunks(self.batch_size).collect();
        let jobs = self.jobs.clamp(1, batches.len().max(1));
        let mut results: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..batches.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, slots) in results.chunks_mut(batches.len().div_ceil(jobs).max(1)).enumerate() {
                let start = w * batches.len().div_ceil(jobs).max(1);
                let batches = &batches;
                s.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(self.extract_batch(batches[start + j]));
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(images.len());
        for r in results {
            out.extend(r.expect("every batch is processed")?);
        }
        Ok(out)
    }

    fn checkpoint_id(&self) -> String {
        self.id.clone()
    }
}

/// Splits each identity's gallery candidates into camera groups, fixed for
/// the protocol seed.
fn camera_groups(candidates: &[usize], ids: &[usize], protocol: &EvalProtocol) -> Vec<(usize, Vec<Vec<usize>>)> {
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in candidates {
        by_id.entry(ids[i]).or_default().push(i);
    }
    by_id
        .into_iter()
        .map(|(id, mut imgs)| {
            imgs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(protocol.seed, &[0xca, id as u64])));
            let mut groups = vec![Vec::new(); protocol.camera_groups];
            for (j, i) in imgs.into_iter().enumerate() {
                groups[j % protocol.camera_groups].push(i);
            }
            (id, groups)
        })
        .collect()
}

/// Evaluates precomputed features of a test pool. `ids` and `modalities`
/// label each feature; queries are all pool entries of the query modality.
/// With `keep_rankings`, every ranked list is returned for auditing.
pub fn evaluate_features(
    features: &[Vec<f64>],
    ids: &[usize],
    modalities: &[ModalityTag],
    protocol: &EvalProtocol,
    checkpoint: &str,
    keep_rankings: bool,
) -> Result<(EvalReport, Vec<RankingDump>)> {
    protocol.validate()?;
    ensure!(
        features.len() == ids.len() && ids.len() == modalities.len(),
        "evaluate: {} features, {} ids, {} modalities",
        features.len(),
        ids.len(),
        modalities.len()
    );
    let qm = protocol.direction.query_modality();
    let queries: Vec<usize> = (0..ids.len()).filter(|&i| modalities[i] == qm).collect();
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| modalities[i] == qm.other()).collect();
    ensure!(!queries.is_empty(), "evaluate: no {} queries in the test pool", qm);
    let groups = camera_groups(&candidates, ids, protocol);
    for &q in &queries {
        ensure!(
            groups.iter().any(|(id, _)| *id == ids[q]),
            "identity {} has no {} gallery images",
            ids[q],
            qm.other()
        );
    }

    let shots = protocol.shots();
    let mut trials = Vec::with_capacity(protocol.trials);
    let mut dumps = Vec::new();
    for trial in 0..protocol.trials {
        let mut gallery: Vec<usize> = Vec::new();
        for (id, id_groups) in &groups {
            for (g, imgs) in id_groups.iter().enumerate() {
                if shots >= imgs.len() {
                    gallery.extend(imgs);
                } else {
                    let seed = derive_seed(protocol.seed, &[trial as u64, *id as u64, g as u64]);
                    gallery.extend(imgs.choose_multiple(&mut ChaCha8Rng::seed_from_u64(seed), shots));
                }
            }
        }
        gallery.sort_unstable();
        let g_feats: Vec<Vec<f64>> = gallery.iter().map(|&i| features[i].clone()).collect();
        let g_ids: Vec<usize> = gallery.iter().map(|&i| ids[i]).collect();

        let ranked = rank_queries(&queries, features, ids, &g_feats, &g_ids)?;
        let mut rankings = Vec::with_capacity(ranked.len());
        let mut skipped = 0;
        for (&q, r) in queries.iter().zip(ranked) {
            match r {
                Some(r) => {
                    if keep_rankings {
                        dumps.push(RankingDump {
                            trial,
                            query: q,
                            query_id: ids[q],
                            gallery: r.order.iter().map(|&j| gallery[j]).collect(),
                            gallery_ids: r.order.iter().map(|&j| g_ids[j]).collect(),
                            distances: r.distances.clone(),
                        });
                    }
                    rankings.push(r);
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("trial {}: {} of {} queries had no relevant gallery item", trial, skipped, queries.len());
        }
        trials.push(TrialMetrics::from_rankings(&rankings, skipped)?);
    }
    Ok((EvalReport::new(protocol.clone(), checkpoint.to_string(), trials), dumps))
}

/// Ranks every query; work is split across threads, results keep query order.
fn rank_queries(
    queries: &[usize],
    features: &[Vec<f64>],
    ids: &[usize],
    g_feats: &[Vec<f64>],
    g_ids: &[usize],
) -> Result<Vec<Option<RankingList>>> {
    let rank = |q: usize| rank_gallery(&features[q], g_feats, ids[q], g_ids);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(queries.len() / 64).max(1);
    if workers == 1 {
        return queries.iter().map(|&q| rank(q)).collect();
    }
    let chunk = queries.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Option<RankingList>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries.chunks(chunk).map(|qs| s.spawn(move || qs.iter().map(|&q| rank(q)).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("ranking worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Extracts features of every test image once, then evaluates the protocol.
pub fn run_protocol<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    test: &[&Image],
    protocol: &EvalProtocol,
    keep_rankings: bool,
) -> Result<(EvalReport, Vec<RankingDump>)> {
    protocol.validate()?;
    let features = extractor.extract(test)?;
    ensure!(features.len() == test.len(), "extractor returned {} features for {} images", features.len(), test.len());
    let ids: Vec<usize> = test.iter().map(|i| i.identity).collect();
    let modalities: Vec<ModalityTag> = test.iter().map(|i| i.modality).collect();
    evaluate_features(&features, &ids, &modalities, protocol, &extractor.checkpoint_id(), keep_rankings)
}
