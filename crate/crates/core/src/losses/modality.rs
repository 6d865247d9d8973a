//! Losses built on modality removal: each feature has the mapped embedding
//! of its own modality subtracted before it is pulled toward a center or
//! classified by an auxiliary head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::losses::classify::{cross_entropy, Reduction};
use crate::losses::metric::DistanceMetric;
use crate::losses::BatchLabels;
use crate::model::{Linear, ModalityTag};
use crate::numerics::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// How a modality embedding is mapped before it is subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    Identity,
    FullyConnected,
}

impl PhiMode {
    pub const ALL: [PhiMode; 2] = [PhiMode::Identity, PhiMode::FullyConnected];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiMode::Identity => "identity",
            PhiMode::FullyConnected => "fully_connected",
        }
    }
}

impl std::fmt::Display for PhiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PhiMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(PhiMode::Identity),
            "fully_connected" | "fc" => Ok(PhiMode::FullyConnected),
            other => Err(format!("unknown phi mode {:?}", other)),
        }
    }
}

/// Per-modality mapping of the modality embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Phi {
    pub mode: PhiMode,
    /// `[visible, infrared]` affine maps; both point at the same map when shared.
    pub maps: Option<[Linear; 2]>,
}

impl Phi {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        mode: PhiMode,
        shared: bool,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let maps = match mode {
            PhiMode::Identity => None,
            PhiMode::FullyConnected if shared => {
                let m = Linear::new(store, "phi.shared", dim, dim, std, rng)?;
                Some([m, m])
            }
            PhiMode::FullyConnected => Some([
                Linear::new(store, "phi.vis", dim, dim, std, rng)?,
                Linear::new(store, "phi.ir", dim, dim, std, rng)?,
            ]),
        };
        Ok(Phi { mode, maps })
    }

    pub fn identity() -> Self {
        Phi { mode: PhiMode::Identity, maps: None }
    }

    /// `[2, D]` table whose rows are `phi_vis(e_vis)` and `phi_ir(e_ir)`.
    /// Missing embeddings are treated as zero vectors.
    pub fn removal_table<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        embeddings: Option<(ParamId, ParamId)>,
        dim: usize,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(2);
        for m in ModalityTag::ALL {
            let e = match embeddings {
                Some((vis, ir)) => {
                    let id = if m == ModalityTag::Visible { vis } else { ir };
                    tape.reshape(pv[id], &[1, dim])?
                }
                None => tape.constant(Tensor::zeros([1, dim])),
            };
            rows.push(match &self.maps {
                Some(maps) => maps[m.index()].forward(tape, pv, e)?,
                None => e,
            });
        }
        tape.concat(&rows, 0)
    }
}

/// `f - phi_m(e^m)` for every row of `f` (`[B, D]`), using each row's own modality.
pub fn modality_removal<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    f: Var,
    modalities: &[ModalityTag],
    embeddings: Option<(ParamId, ParamId)>,
    phi: &Phi,
) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    ensure!(shape.len() == 2, "modality_removal: features must be [B, D], got {:?}", shape);
    ensure!(modalities.len() == shape[0], "modality_removal: {} tags for {} rows", modalities.len(), shape[0]);
    let table = phi.removal_table(tape, pv, embeddings, shape[1])?;
    let idx: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
    let rows = tape.index_select(table, &idx)?;
    tape.sub(f, rows)
}

/// Center-group index of every sample, groups numbered by first appearance.
/// Returns `(group_of_sample, group_sizes)`.
pub(crate) fn center_groups(batch: &BatchLabels, shared_center: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    batch.validate()?;
    for &id in batch.ids.iter() {
        for m in ModalityTag::ALL {
            ensure!(
                batch.ids.iter().zip(&batch.modalities).any(|(&i, &mm)| i == id && mm == m),
                "identity {} has no {} image in the batch",
                id,
                m
            );
        }
    }
    let mut keys: Vec<(usize, Option<ModalityTag>)> = Vec::new();
    let mut sizes = Vec::new();
    let mut group = Vec::with_capacity(batch.len());
    for (&id, &m) in batch.ids.iter().zip(&batch.modalities) {
        let key = (id, if shared_center { None } else { Some(m) });
        let g = match keys.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                keys.push(key);
                sizes.push(0);
                keys.len() - 1
            }
        };
        sizes[g] += 1;
        group.push(g);
    }
    Ok((group, sizes))
}

/// Per-group mean of the rows of `x` (`[B, D]`), gathered back to `[B, D]`.
fn group_centers<T: Scalar>(tape: &mut Tape<T>, x: Var, group: &[usize], sizes: &[usize]) -> Result<Var> {
    let (b, g) = (group.len(), sizes.len());
    let mut avg = vec![T::zero(); g * b];
    for (i, &gi) in group.iter().enumerate() {
        avg[gi * b + i] = T::one() / T::of(sizes[gi] as f64);
    }
    let avg = tape.constant(Tensor::new([g, b], avg)?);
    let centers = tape.matmul(avg, x)?;
    tape.index_select(centers, group)
}

/// Soft-margin center pull on already modality-removed features:
/// `sum_i softplus(D(x_i, c_{g(i)}))`, where `c_g` is the mean of group `g`.
/// Groups are (identity, modality) pairs, or identities when `shared_center`.
/// Centers are differentiated through.
pub fn mac_loss<T: Scalar>(
    tape: &mut Tape<T>,
    removed: Var,
    batch: &BatchLabels,
    metric: DistanceMetric,
    shared_center: bool,
) -> Result<Var> {
    let (group, sizes) = center_groups(batch, shared_center)?;
    ensure!(tape.shape(removed)[0] == group.len(), "mac_loss: feature rows do not match labels");
    let centers = group_centers(tape, removed, &group, &sizes)?;
    let dist = metric.rows(tape, removed, centers)?;
    let terms = tape.softplus(dist);
    Ok(tape.sum(terms))
}

/// Auxiliary-head cross-entropy on modality-removed features, summed over the batch.
pub fn maid_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, aux: &Linear, removed: Var, ids: &[usize]) -> Result<Var> {
    let logits = aux.forward(tape, pv, removed)?;
    cross_entropy(tape, logits, ids, Reduction::Sum)
}
