use crate::error::{ensure, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Cross-entropy of `[B, C]` logits against integer labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    ensure!(shape.len() == 2, "cross_entropy: logits must be [B, C], got {:?}", shape);
    let (b, c) = (shape[0], shape[1]);
    ensure!(labels.len() == b, "cross_entropy: {} labels for {} rows", labels.len(), b);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(crate::CmtrError::contract(format!("cross_entropy: label {} out of range for {} classes", bad, c)));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let mut onehot = vec![T::zero(); b * c];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * c + l] = T::one();
    }
    let onehot = tape.constant(Tensor::new([b, c], onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked);
    let total = tape.neg(total);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, T::one() / T::of(b as f64)),
    })
}

/// Identity classification loss: mean cross-entropy over the batch.
pub fn id_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, logits, labels, Reduction::Mean)
}

/// Weighted-regularisation triplet loss on `[B, D]` vectors.
///
/// For anchor `i`, positives are other samples with the same label and
/// negatives all samples with a different one. With Euclidean distances
/// `d_ij`, `w_p = softmax(d_ij)` over positives and `w_n = softmax(-d_ik)`
/// over negatives; the anchor term is `softplus(sum w_p d - sum w_n d)`.
/// Returns the mean over anchors.
pub fn wrt_loss<T: Scalar>(tape: &mut Tape<T>, v: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    ensure!(shape.len() == 2, "wrt_loss: features must be [B, D], got {:?}", shape);
    let (b, d) = (shape[0], shape[1]);
    ensure!(labels.len() == b, "wrt_loss: {} labels for {} rows", labels.len(), b);
    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            pos[i * b + j] = i != j && labels[i] == labels[j];
            neg[i * b + j] = labels[i] != labels[j];
        }
        ensure!(pos[i * b..(i + 1) * b].iter().any(|&p| p), "wrt_loss: anchor {} has no positive", i);
        ensure!(neg[i * b..(i + 1) * b].iter().any(|&p| p), "wrt_loss: anchor {} has no negative", i);
    }
    let rows = tape.reshape(v, &[b, 1, d])?;
    let cols = tape.reshape(v, &[1, b, d])?;
    let diff = tape.sub(rows, cols)?;
    let sq = tape.square(diff);
    let ss = tape.sum_axis(sq, 2)?;
    let dist = tape.sqrt(ss)?;

    let wp = tape.masked_softmax(dist, &pos)?;
    let ap = tape.mul(dist, wp)?;
    let furthest_pos = tape.sum_axis(ap, 1)?;
    let neg_dist = tape.neg(dist);
    let wn = tape.masked_softmax(neg_dist, &neg)?;
    let an = tape.mul(dist, wn)?;
    let closest_neg = tape.sum_axis(an, 1)?;

    let gap = tape.sub(furthest_pos, closest_neg)?;
    let per_anchor = tape.softplus(gap);
    tape.mean(per_anchor)
}
