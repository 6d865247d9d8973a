//! Training loop: identity-balanced batches, the overall objective, AdamW
//! with step decay, per-step logs and resumable checkpoints.

mod optim;
mod schedule;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::Schedule;

use crate::data::{augment, derive_seed, sample_batch, AugmentConfig, BatchSpec, Dataset, IdentityIndex};
use crate::error::{ensure, CmtrError, Result};
use crate::losses::{overall_loss, LossBreakdown, LossConfig, LossHeads};
use crate::model::{Checkpoint, Cmtr, Image, ModelConfig, NeckMode};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::scalar::Scalar;

const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    EveryEpoch,
    FinalOnly,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch: BatchSpec,
    pub augment: AugmentConfig,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Keep the modality embeddings at their (zero) initial value.
    pub freeze_modality_embedding: bool,
    /// Batches per epoch; defaults to `ceil(train images / batch size)`.
    pub steps_per_epoch: Option<usize>,
    pub checkpoints: CheckpointPolicy,
    /// Root of every random stream (initialisation, sampling, augmentation).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            batch: BatchSpec::default(),
            augment: AugmentConfig::default(),
            schedule: Schedule::default(),
            optimizer: AdamWConfig::default(),
            clip_grad_norm: None,
            freeze_modality_embedding: false,
            steps_per_epoch: None,
            checkpoints: CheckpointPolicy::EveryEpoch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.batch.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        ensure!(
            !self.loss.uses_modality_losses() || self.model.modality_embedding,
            "MAC/MAID need the modality embeddings; enable model.modality_embedding"
        );
        if let Some(c) = self.clip_grad_norm {
            ensure!(c > 0.0, "clip_grad_norm must be positive");
        }
        ensure!(self.steps_per_epoch != Some(0), "steps_per_epoch must be >= 1");
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CmtrError::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CmtrError::Format(e.to_string()))
    }

    pub fn steps_for(&self, train_images: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| train_images.div_ceil(self.batch.batch_size()).max(1))
    }
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_id: f64,
    pub l_wrt: f64,
    pub l_mac: f64,
    pub l_maid: f64,
    /// Unweighted center or hetero-center baseline term.
    pub l_aux: f64,
    pub lambda: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub const STEP_LOG: &str = "steps.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{}", epoch)
}

/// Model, loss heads and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f64> {
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub model: Cmtr<T>,
    pub heads: LossHeads,
    pub optim: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps; also selects the sampler and augmentation streams.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
        let mut store = ParamStore::new();
        let model = Cmtr::new(cfg.model.clone(), &mut store, &mut rng)?;
        let heads = LossHeads::new(&mut store, &cfg.loss, cfg.model.embed_dim(), cfg.model.num_ids, cfg.model.init_std, &mut rng)?;
        if cfg.freeze_modality_embedding {
            if let Some((vis, ir)) = model.embed.modality {
                store.set_trainable(vis, false);
                store.set_trainable(ir, false);
            }
        }
        let optim = AdamW::new(cfg.optimizer, &store);
        Ok(Trainer { cfg, store, model, heads, optim, epoch: 0, step: 0 })
    }

    /// Runs one optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self, data: &Dataset, index: &IdentityIndex, fill: [f64; 3]) -> Result<StepRecord> {
        let lr = self.cfg.schedule.lr_at(self.epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[SAMPLER_STREAM, self.step]));
        let batch = sample_batch(index, &self.cfg.batch, &mut rng)?;
        let images: Vec<Image> = batch
            .indices
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let seed = derive_seed(self.cfg.seed, &[AUGMENT_STREAM, self.step, j as u64]);
                augment(&data.images[i], &self.cfg.augment, fill, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .collect();
        let refs: Vec<&Image> = images.iter().collect();

        let mut tape = Tape::new();
        let pv = self.store.bind(&mut tape);
        let out = self.model.forward(&mut tape, &pv, &refs, NeckMode::Train)?;
        let (loss, parts) = overall_loss(&mut tape, &pv, &self.model, &self.heads, &out, &batch.labels, &self.cfg.loss)?;
        if !parts.is_finite() {
            return Err(self.diagnostic("loss", &parts, f64::NAN));
        }
        let grads = tape.backward(loss)?;
        self.store.write_grads(&grads, &pv);
        let grad_norm = match self.cfg.clip_grad_norm {
            Some(c) => clip_grad_norm(&mut self.store, c),
            None => self.store.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(self.diagnostic("gradient", &parts, grad_norm));
        }
        self.optim.step(&mut self.store, lr)?;
        self.store.zero_grads();
        if let Some(stats) = &out.neck_stats {
            self.model.update_running_stats(stats);
        }
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            l_id: parts.id,
            l_wrt: parts.wrt,
            l_mac: parts.mac,
            l_maid: parts.maid,
            l_aux: parts.aux,
            lambda: parts.lambda,
            total: parts.total,
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    fn diagnostic(&self, what: &str, parts: &LossBreakdown, grad_norm: f64) -> CmtrError {
        let mut worst: Vec<(f64, &str)> =
            self.store.iter().map(|(_, name, t)| (t.grad_norm_sq().sqrt(), name)).filter(|(n, _)| *n != 0.0).collect();
        worst.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: Vec<String> = worst.iter().take(5).map(|(n, name)| format!("{}={:.3e}", name, n)).collect();
        CmtrError::NonFinite(format!(
            "non-finite {} at step {} (epoch {}): id={} wrt={} mac={} maid={} aux={} total={} grad_norm={} largest grads [{}]",
            what,
            self.step,
            self.epoch,
            parts.id,
            parts.wrt,
            parts.mac,
            parts.maid,
            parts.aux,
            parts.total,
            grad_norm,
            top.join(", ")
        ))
    }

    /// Trains the remaining epochs. With `out_dir`, appends to the step log
    /// and writes checkpoints there according to the policy.
    pub fn run(&mut self, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        data.validate_for(&self.cfg.batch)?;
        let max_id = data.identities().last().copied().unwrap_or(0);
        ensure!(
            max_id < self.cfg.model.num_ids,
            "training label {} exceeds classifier size {}",
            max_id,
            self.cfg.model.num_ids
        );
        let index = IdentityIndex::new(data);
        let fill = data.channel_mean();
        let steps = self.cfg.steps_for(data.len());
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(StepLog::open(&dir.join(STEP_LOG))?)
            }
            None => None,
        };
        let mut records = Vec::new();
        let total_epochs = self.cfg.schedule.epochs;
        while self.epoch < total_epochs {
            let mut sum = 0.0;
            for _ in 0..steps {
                let r = self.train_step(data, &index, fill)?;
                sum += r.total;
                if let Some(log) = log.as_mut() {
                    log.write(&r)?;
                }
                records.push(r);
            }
            self.epoch += 1;
            log::info!("epoch {}/{}: mean loss {:.4}", self.epoch, total_epochs, sum / steps as f64);
            if let (Some(dir), CheckpointPolicy::EveryEpoch) = (out_dir, self.cfg.checkpoints) {
                self.save(dir)?;
            }
        }
        // A run with no epochs left still leaves its state behind.
        let final_save = match self.cfg.checkpoints {
            CheckpointPolicy::FinalOnly => true,
            CheckpointPolicy::EveryEpoch => records.is_empty(),
            CheckpointPolicy::Never => false,
        };
        if let (Some(dir), true) = (out_dir, final_save) {
            self.save(dir)?;
        }
        Ok(records)
    }

    /// Writes `ckpt_epoch{N}` for the completed epoch count.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(checkpoint_name(self.epoch));
        self.to_checkpoint()?.save(&path)?;
        Ok(path)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.cfg.model.clone());
        ck.set_meta("train_config", self.cfg.to_toml()?);
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("step", self.step);
        ck.set_meta("optimizer_step", self.optim.step);
        for (i, (_, name, t)) in self.store.iter().enumerate() {
            ck.push(format!("param/{}", name), t);
            ck.push(format!("adam_m/{}", name), &Tensor::new([t.len()], self.optim.m[i].clone())?);
            ck.push(format!("adam_v/{}", name), &Tensor::new([t.len()], self.optim.v[i].clone())?);
        }
        let d = self.model.running_mean.len();
        ck.push("bn/running_mean", &Tensor::new([d], self.model.running_mean.clone())?);
        ck.push("bn/running_var", &Tensor::new([d], self.model.running_var.clone())?);
        Ok(ck)
    }

    /// Rebuilds a trainer, including optimizer moments and stream positions.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| CmtrError::Format(format!("checkpoint lacks {:?}", k)));
        let parse = |k: &str| -> Result<u64> { meta(k)?.parse().map_err(|_| CmtrError::Format(format!("bad {:?} in checkpoint", k))) };
        let cfg = TrainConfig::from_toml(meta("train_config")?)?;
        let mut tr = Trainer::new(cfg)?;
        tr.epoch = parse("epoch")? as usize;
        tr.step = parse("step")?;
        tr.optim.step = parse("optimizer_step")?;
        let names: Vec<String> = tr.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ck.get(&format!("{}/{}", prefix, name))
                    .ok_or_else(|| CmtrError::Format(format!("checkpoint lacks {}/{}", prefix, name)))
            };
            let p = get("param")?;
            let id = tr.store.id(name).expect("name comes from the store");
            ensure!(p.shape() == tr.store.get(id).shape(), "checkpoint shape {:?} for {}", p.shape(), name);
            let data: Vec<T> = p.data().iter().map(|&x| T::of(x)).collect();
            tr.store.assign(id, &data)?;
            tr.optim.m[i] = get("adam_m")?.data().to_vec();
            tr.optim.v[i] = get("adam_v")?.data().to_vec();
        }
        let stat = |k: &str| -> Result<Vec<T>> {
            let t = ck.get(k).ok_or_else(|| CmtrError::Format(format!("checkpoint lacks {}", k)))?;
            Ok(t.data().iter().map(|&x| T::of(x)).collect())
        };
        tr.model.running_mean = stat("bn/running_mean")?;
        tr.model.running_var = stat("bn/running_var")?;
        Ok(tr)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Appending CSV step log; the header is written once per file.
struct StepLog {
    w: csv::Writer<fs::File>,
}

impl StepLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(StepLog { w })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.w.serialize(r).map_err(|e| CmtrError::Format(e.to_string()))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Reads a step log written by [`Trainer::run`].
pub fn read_step_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CmtrError::Format(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| CmtrError::Format(e.to_string()))).collect()
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
