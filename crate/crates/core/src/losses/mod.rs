//! Training objectives.
//!
//! Placement is fixed: the triplet loss sees the pre-neck vectors `v`, the
//! identity loss sees main-head logits, and the modality-aware and baseline
//! losses see the post-neck features `f`. Identity and triplet losses are
//! batch means; the modality-aware losses and baselines are batch sums.

mod baseline;
mod classify;
mod metric;
mod modality;

pub use baseline::{center_loss, hc_loss};
pub use classify::{cross_entropy, id_loss, wrt_loss, Reduction};
pub use metric::{DistanceMetric, SMOOTH_L1_BETA};
pub use modality::{mac_loss, maid_loss, modality_removal, Phi, PhiMode};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{Cmtr, ForwardOutput, Linear, ModalityTag};
use crate::numerics::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Labels of one batch, aligned with its feature rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    pub ids: Vec<usize>,
    pub modalities: Vec<ModalityTag>,
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.ids.len() == self.modalities.len(),
            "batch has {} labels but {} modality tags",
            self.ids.len(),
            self.modalities.len()
        );
        ensure!(!self.ids.is_empty(), "empty batch");
        Ok(())
    }
}

/// Extra metric-learning term compared against the modality-aware losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    Center,
    Hc,
}

/// Named loss combinations used by the loss-constraint comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    None,
    Center,
    Hc,
    Mae,
}

impl LossSet {
    pub const ALL: [LossSet; 4] = [LossSet::None, LossSet::Center, LossSet::Hc, LossSet::Mae];

    pub fn as_str(self) -> &'static str {
        match self {
            LossSet::None => "none",
            LossSet::Center => "center",
            LossSet::Hc => "hc",
            LossSet::Mae => "mae",
        }
    }

    pub fn apply(self, cfg: &mut LossConfig) {
        let (mae, baseline) = match self {
            LossSet::None => (false, Baseline::None),
            LossSet::Center => (false, Baseline::Center),
            LossSet::Hc => (false, Baseline::Hc),
            LossSet::Mae => (true, Baseline::None),
        };
        cfg.mac = mae;
        cfg.maid = mae;
        cfg.baseline = baseline;
    }
}

impl std::fmt::Display for LossSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossSet::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown loss set {:?}", s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the modality-aware term in the overall objective.
    pub lambda: f64,
    pub mac: bool,
    pub maid: bool,
    pub baseline: Baseline,
    pub center_weight: f64,
    pub hc_weight: f64,
    pub phi_mode: PhiMode,
    pub shared_phi: bool,
    pub metric: DistanceMetric,
    /// One cross-modality center per identity instead of one per modality.
    pub shared_center: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 4.0,
            mac: true,
            maid: true,
            baseline: Baseline::None,
            center_weight: 5e-4,
            hc_weight: 0.5,
            phi_mode: PhiMode::FullyConnected,
            shared_phi: false,
            metric: DistanceMetric::Cosine,
            shared_center: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be a finite value >= 0, got {}", self.lambda);
        ensure!(self.center_weight >= 0.0 && self.hc_weight >= 0.0, "baseline weights must be >= 0");
        Ok(())
    }

    pub fn uses_modality_losses(&self) -> bool {
        self.mac || self.maid
    }
}

/// Parameters owned by the losses rather than the backbone.
#[derive(Debug, Clone)]
pub struct LossHeads {
    pub phi: Phi,
    /// Auxiliary identity classifier on modality-removed features.
    pub aux: Option<Linear>,
    /// Learnable per-identity centers `[C, D]` for the center baseline.
    pub centers: Option<ParamId>,
}

impl LossHeads {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &LossConfig,
        dim: usize,
        num_ids: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let phi = if cfg.uses_modality_losses() {
            Phi::new(store, cfg.phi_mode, cfg.shared_phi, dim, init_std, rng)?
        } else {
            Phi::identity()
        };
        let aux = if cfg.maid { Some(Linear::new(store, "aux_id", dim, num_ids, init_std, rng)?) } else { None };
        let centers =
            if cfg.baseline == Baseline::Center { Some(store.insert("centers", Tensor::zeros([num_ids, dim]))?) } else { None };
        Ok(LossHeads { phi, aux, centers })
    }
}

/// Per-step values of every component; disabled components are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub id: f64,
    pub wrt: f64,
    pub mac: f64,
    pub maid: f64,
    /// Unweighted center or hetero-center baseline.
    pub aux: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.id, self.wrt, self.mac, self.maid, self.aux, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_ID + L_WRT + lambda * L_MAE`.
pub fn combine(id: f64, wrt: f64, mae: f64, lambda: f64) -> f64 {
    id + wrt + lambda * mae
}

/// Overall objective for one forward pass; returns the scalar to
/// differentiate and the logged components.
pub fn overall_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    model: &Cmtr<T>,
    heads: &LossHeads,
    out: &ForwardOutput<T>,
    batch: &BatchLabels,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    batch.validate()?;
    let id = id_loss(tape, out.logits, &batch.ids)?;
    let wrt = wrt_loss(tape, out.v, &batch.ids)?;
    let mut total = tape.add(id, wrt)?;
    let mut parts = LossBreakdown {
        id: tape.item(id).as_f64(),
        wrt: tape.item(wrt).as_f64(),
        lambda: cfg.lambda,
        ..LossBreakdown::default()
    };

    if cfg.uses_modality_losses() {
        let removed = modality_removal(tape, pv, out.f, &batch.modalities, model.embed.modality, &heads.phi)?;
        let mut mae: Option<Var> = None;
        if cfg.mac {
            let mac = mac_loss(tape, removed, batch, cfg.metric, cfg.shared_center)?;
            parts.mac = tape.item(mac).as_f64();
            mae = Some(mac);
        }
        if cfg.maid {
            let aux = heads.aux.as_ref().ok_or_else(|| crate::CmtrError::contract("maid enabled but no auxiliary head"))?;
            let maid = maid_loss(tape, pv, aux, removed, &batch.ids)?;
            parts.maid = tape.item(maid).as_f64();
            mae = Some(match mae {
                Some(m) => tape.add(m, maid)?,
                None => maid,
            });
        }
        if let (Some(mae), true) = (mae, cfg.lambda != 0.0) {
            let weighted = tape.scale(mae, T::of(cfg.lambda));
            total = tape.add(total, weighted)?;
        }
    }

    let baseline = match cfg.baseline {
        Baseline::None => None,
        Baseline::Center => {
            let centers = heads.centers.ok_or_else(|| crate::CmtrError::contract("center baseline without centers"))?;
            Some((center_loss(tape, out.f, pv[centers], &batch.ids)?, cfg.center_weight))
        }
        Baseline::Hc => Some((hc_loss(tape, out.f, batch)?, cfg.hc_weight)),
    };
    if let Some((value, weight)) = baseline {
        parts.aux = tape.item(value).as_f64();
        if weight != 0.0 {
            let weighted = tape.scale(value, T::of(weight));
            total = tape.add(total, weighted)?;
        }
    }
    parts.total = tape.item(total).as_f64();
    Ok((total, parts))
}
