use crate::error::{ensure, Result};
use crate::losses::BatchLabels;
use crate::model::ModalityTag;
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// `sum_i ||f_i - c_{y_i}||^2 / 2` against learnable centers `[C, D]`.
pub fn center_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, centers: Var, ids: &[usize]) -> Result<Var> {
    let c = tape.shape(centers)[0];
    ensure!(tape.shape(f)[0] == ids.len(), "center_loss: {} labels for {} rows", ids.len(), tape.shape(f)[0]);
    if let Some(&bad) = ids.iter().find(|&&l| l >= c) {
        return Err(crate::CmtrError::contract(format!("center_loss: label {} has no center (C = {})", bad, c)));
    }
    let picked = tape.index_select(centers, ids)?;
    let diff = tape.sub(f, picked)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::of(0.5)))
}

/// Hetero-center loss: `sum_q ||c_q^vis - c_q^ir||^2` with per-identity,
/// per-modality batch means. Identities are taken in order of first appearance.
pub fn hc_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, batch: &BatchLabels) -> Result<Var> {
    batch.validate()?;
    let b = batch.len();
    ensure!(tape.shape(f)[0] == b, "hc_loss: {} labels for {} rows", b, tape.shape(f)[0]);
    let mut order: Vec<usize> = Vec::new();
    for &id in &batch.ids {
        if !order.contains(&id) {
            order.push(id);
        }
    }
    let q = order.len();
    // signed averaging matrix: +1/n_vis on visible members, -1/n_ir on infrared ones
    let mut avg = vec![T::zero(); q * b];
    for (row, &id) in order.iter().enumerate() {
        for m in ModalityTag::ALL {
            let members: Vec<usize> =
                (0..b).filter(|&i| batch.ids[i] == id && batch.modalities[i] == m).collect();
            ensure!(!members.is_empty(), "hc_loss: identity {} has no {} image", id, m);
            let w = T::one() / T::of(members.len() as f64);
            let w = if m == ModalityTag::Visible { w } else { -w };
            for i in members {
                avg[row * b + i] = w;
            }
        }
    }
    let avg = tape.constant(Tensor::new([q, b], avg)?);
    let gaps = tape.matmul(avg, f)?;
    let sq = tape.square(gaps);
    Ok(tape.sum(sq))
}
