use crate::error::{CmtrError, Result};
use crate::numerics::tensor::numel;

/// How an operand's flat index is derived from the output's flat index.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    /// Same shape as the output.
    Identity,
    /// Operand equals a trailing block of the output: `i % n`.
    Modulo(usize),
    /// Operand equals a leading block with trailing broadcast: `i / n`.
    Divide(usize),
    /// General case, one entry per output element.
    Table(Vec<usize>),
}

impl IndexMap {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Divide(n) => i / n,
            IndexMap::Table(t) => t[i],
        }
    }

    /// Calls `f(i, src_index)` for output positions `0..n` in order.
    #[inline]
    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            IndexMap::Identity => (0..n).for_each(|i| f(i, i)),
            IndexMap::Modulo(m) => {
                for start in (0..n).step_by(*m) {
                    (0..*m).for_each(|j| f(start + j, j));
                }
            }
            IndexMap::Divide(m) => {
                for (blk, start) in (0..n).step_by(*m).enumerate() {
                    (start..start + m).for_each(|i| f(i, blk));
                }
            }
            IndexMap::Table(t) => t.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

/// Calls `f(i, index_in_a, index_in_b)` for output positions `0..n`.
#[inline]
pub(crate) fn for_each_pair(ma: &IndexMap, mb: &IndexMap, n: usize, mut f: impl FnMut(usize, usize, usize)) {
    match (ma, mb) {
        (IndexMap::Identity, _) => mb.for_each(n, |i, j| f(i, i, j)),
        (_, IndexMap::Identity) => ma.for_each(n, |i, j| f(i, j, i)),
        _ => (0..n).for_each(|i| f(i, ma.at(i), mb.at(i))),
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(CmtrError::shape(op, format!("cannot broadcast {:?} with {:?}", a, b)));
            }
        };
    }
    Ok(out)
}

/// Builds the map from output positions into an operand of shape `src`
/// broadcast to `out`.
pub(crate) fn index_map(src: &[usize], out: &[usize]) -> IndexMap {
    let n_src = numel(src);
    let n_out = numel(out);
    if n_src == n_out {
        return IndexMap::Identity;
    }
    let pad = out.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat(1).take(pad).chain(src.iter().copied()).collect();
    // trailing block: leading dims of src are all 1 and the rest match
    let first_real = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
    if padded[first_real..] == out[first_real..] {
        return IndexMap::Modulo(n_src.max(1));
    }
    // leading block: src matches out up to some axis, then all ones
    let last_real = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last_real] == out[..last_real] && padded[last_real..].iter().all(|&d| d == 1) {
        return IndexMap::Divide(numel(&out[last_real..]).max(1));
    }
    let mut src_strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..out.len()).rev() {
        src_strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let mut table = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..n_out {
        table.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    IndexMap::Table(table)
}
