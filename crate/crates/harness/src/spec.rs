//! Experiment specification: what to train, how to evaluate, which axis to
//! sweep and over which seeds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cmtr::data::{BatchSpec, BenchmarkConfig};
use cmtr::eval::EvalProtocol;
use cmtr::losses::{Baseline, DistanceMetric, LossSet, PhiMode};
use cmtr::model::{seq_len, ModelConfig, PatchConfig};
use cmtr::training::{CheckpointPolicy, Schedule, TrainConfig};
use cmtr::{CmtrError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    None,
    /// The five-row component grid: base, me, me+mac, me+maid, me+mac+maid.
    Ablation,
    Stride,
    Lambda,
    LossSet,
    PhiMode,
    DistanceMetric,
    /// Joint phi-mode x distance-metric grid, values `phi:metric`.
    MaeDesign,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::None,
        Axis::Ablation,
        Axis::Stride,
        Axis::Lambda,
        Axis::LossSet,
        Axis::PhiMode,
        Axis::DistanceMetric,
        Axis::MaeDesign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::None => "none",
            Axis::Ablation => "ablation",
            Axis::Stride => "stride",
            Axis::Lambda => "lambda",
            Axis::LossSet => "loss_set",
            Axis::PhiMode => "phi_mode",
            Axis::DistanceMetric => "distance_metric",
            Axis::MaeDesign => "mae_design",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self, train: &TrainConfig) -> Vec<String> {
        match self {
            Axis::None => vec!["default".into()],
            Axis::Ablation => ABLATION_ROWS.iter().map(|s| s.to_string()).collect(),
            Axis::Stride => {
                let p = train.model.patch.patch_size;
                (0..).map(|i| p - 2 * i).take_while(|&s| s >= p.div_ceil(2) && s >= 1).map(|s| s.to_string()).collect()
            }
            Axis::Lambda => (0..=6).map(|l| l.to_string()).collect(),
            Axis::LossSet => LossSet::ALL.iter().map(|l| l.to_string()).collect(),
            Axis::PhiMode => PhiMode::ALL.iter().map(|p| p.as_str().to_string()).collect(),
            Axis::DistanceMetric => DistanceMetric::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            Axis::MaeDesign => PhiMode::ALL
                .iter()
                .flat_map(|p| DistanceMetric::ALL.iter().map(move |m| format!("{}:{}", p.as_str(), m.as_str())))
                .collect(),
        }
    }

    /// Applies one sweep value to a training configuration.
    pub fn apply(self, value: &str, cfg: &mut TrainConfig) -> Result<()> {
        let bad = |what: &str| CmtrError::Contract(format!("{} axis: invalid value {:?} ({})", self, value, what));
        match self {
            Axis::None => {}
            Axis::Ablation => {
                let (me, mac, maid) = match value {
                    "base" => (false, false, false),
                    "me" => (true, false, false),
                    "me+mac" => (true, true, false),
                    "me+maid" => (true, false, true),
                    "me+mac+maid" => (true, true, true),
                    _ => return Err(bad("expected one of base, me, me+mac, me+maid, me+mac+maid")),
                };
                cfg.model.modality_embedding = me;
                cfg.loss.mac = mac;
                cfg.loss.maid = maid;
                cfg.loss.baseline = Baseline::None;
            }
            Axis::Stride => {
                let s: usize = value.parse().map_err(|_| bad("not an integer"))?;
                if s == 0 || s > cfg.model.patch.patch_size {
                    return Err(bad(&format!("stride must satisfy 1 <= S <= P = {}", cfg.model.patch.patch_size)));
                }
                cfg.model.patch.stride = s;
            }
            Axis::Lambda => {
                let l: f64 = value.parse().map_err(|_| bad("not a number"))?;
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(bad("lambda must be finite and >= 0"));
                }
                cfg.loss.lambda = l;
            }
            Axis::LossSet => value.parse::<LossSet>().map_err(|e| bad(&e))?.apply(&mut cfg.loss),
            Axis::PhiMode => cfg.loss.phi_mode = value.parse().map_err(|e: String| bad(&e))?,
            Axis::DistanceMetric => cfg.loss.metric = value.parse().map_err(|e: String| bad(&e))?,
            Axis::MaeDesign => {
                let (phi, metric) = value.split_once(':').ok_or_else(|| bad("expected phi:metric"))?;
                cfg.loss.phi_mode = phi.parse().map_err(|e: String| bad(&e))?;
                cfg.loss.metric = metric.parse().map_err(|e: String| bad(&e))?;
            }
        }
        Ok(())
    }
}

pub const ABLATION_ROWS: [&str; 5] = ["base", "me", "me+mac", "me+maid", "me+mac+maid"];

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Axis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.as_str()).collect();
            format!("unknown axis {:?}; expected one of {}", s, names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Empty means the axis defaults.
    pub values: Vec<String>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { axis: Axis::None, values: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Cells trained concurrently.
    pub jobs: usize,
    pub precision: Precision,
    pub benchmark: BenchmarkConfig,
    /// Image size and class count are taken from `benchmark`; the seed from
    /// the cell.
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub sweep: SweepSpec,
}

/// Training setup sized for the toy benchmark.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            patch: PatchConfig { patch_size: 16, stride: 8, embed_dim: 32 },
            depth: 2,
            heads: 4,
            ..ModelConfig::default()
        },
        batch: BatchSpec { q: 8, k: 8 },
        schedule: Schedule::default(),
        checkpoints: CheckpointPolicy::FinalOnly,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "toy".into(),
            seeds: vec![1, 2, 3],
            jobs: 1,
            precision: Precision::F32,
            benchmark: BenchmarkConfig::default(),
            train: toy_train_config(),
            eval: EvalProtocol::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn first_unknown_key(patch: &toml::Value, known: &toml::Value, prefix: String) -> Option<String> {
    let (toml::Value::Table(p), toml::Value::Table(k)) = (patch, known) else { return None };
    p.iter().find_map(|(key, v)| {
        let path = if prefix.is_empty() { key.clone() } else { format!("{}.{}", prefix, key) };
        match k.get(key) {
            None => Some(path),
            Some(inner) => first_unknown_key(v, inner, path),
        }
    })
}

impl ExperimentSpec {
    /// Parses a spec; every key left out keeps its value from
    /// [`ExperimentSpec::default`], at any nesting depth.
    pub fn from_toml(text: &str) -> Result<Self> {
        let patch: toml::Value = toml::from_str(text).map_err(|e| CmtrError::Contract(e.to_string()))?;
        let mut base = toml::Value::try_from(ExperimentSpec::default()).map_err(|e| CmtrError::Format(e.to_string()))?;
        merge(&mut base, patch.clone());
        let spec: ExperimentSpec = base.try_into().map_err(|e: toml::de::Error| CmtrError::Contract(e.to_string()))?;
        // Keys that do not survive a round trip were not recognised.
        let parsed = toml::Value::try_from(&spec).map_err(|e| CmtrError::Format(e.to_string()))?;
        if let Some(key) = first_unknown_key(&patch, &parsed, String::new()) {
            return Err(CmtrError::Contract(format!("unknown config key {:?}", key)));
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CmtrError::Contract(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CmtrError::Format(e.to_string()))
    }

    /// Sweep values, falling back to the axis defaults.
    pub fn values(&self) -> Vec<String> {
        if self.sweep.values.is_empty() {
            self.sweep.axis.default_values(&self.train)
        } else {
            self.sweep.values.clone()
        }
    }

    /// Training configuration of one `(value, seed)` cell.
    pub fn resolve(&self, value: &str, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.model.img_h = self.benchmark.img_h;
        cfg.model.img_w = self.benchmark.img_w;
        cfg.model.num_ids = self.benchmark.train_ids;
        cfg.seed = seed;
        self.sweep.axis.apply(value, &mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Token count (without the class token) of a resolved cell.
    pub fn seq_len(cfg: &TrainConfig) -> Result<usize> {
        let m = &cfg.model;
        seq_len(m.img_h, m.img_w, m.patch.patch_size, m.patch.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CmtrError::Contract("seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(CmtrError::Contract("jobs must be >= 1".into()));
        }
        let values = self.values();
        if values.is_empty() {
            return Err(CmtrError::Contract(format!("{} axis has no values", self.sweep.axis)));
        }
        for v in &values {
            self.resolve(v, self.seeds[0])?;
        }
        self.eval.validate()?;
        Ok(())
    }
}
