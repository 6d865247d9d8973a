//! Fused multi-head scaled dot-product attention.
//!
//! Input is the packed projection `[B, T, 3D]` laid out as `[q | k | v]`;
//! head `h` uses columns `h*dh..(h+1)*dh` of each part. Output is `[B, T, D]`
//! with heads concatenated along the last axis.

use crate::error::{CmtrError, Result};
use crate::numerics::tape::{Op, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub b: usize,
    pub t: usize,
    pub heads: usize,
    pub dh: usize,
}

impl AttnDims {
    fn d(&self) -> usize {
        self.heads * self.dh
    }

    /// Offset of part `which` (0 = q, 1 = k, 2 = v) for batch `bi`, head `h`.
    fn part(&self, bi: usize, h: usize, which: usize) -> usize {
        bi * self.t * 3 * self.d() + which * self.d() + h * self.dh
    }
}

fn softmax_rows_inplace<T: Scalar>(s: &mut [T], t: usize) {
    for row in s.chunks_exact_mut(t) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn multi_head_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % (3 * heads) != 0 {
            return Err(CmtrError::shape("multi_head_attention", format!("{:?} with {} heads", shape, heads)));
        }
        let dims = AttnDims { b: shape[0], t: shape[1], heads, dh: shape[2] / (3 * heads) };
        let (t, dh, d) = (dims.t, dims.dh, dims.d());
        let row = (3 * d) as isize;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let src = self.data(qkv);
        let mut probs = vec![T::zero(); dims.b * heads * t * t];
        let mut out = vec![T::zero(); dims.b * t * d];
        for bi in 0..dims.b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t * t..][..t * t];
                let q = &src[dims.part(bi, h, 0)..];
                let k = &src[dims.part(bi, h, 1)..];
                // S = scale * Q K^T
                T::gemm(t, dh, t, scale, q, (row, 1), k, (1, row), T::zero(), p, (t as isize, 1));
                softmax_rows_inplace(p, t);
                let v = &src[dims.part(bi, h, 2)..];
                let o = &mut out[bi * t * d + h * dh..];
                T::gemm(t, t, dh, T::one(), p, (t as isize, 1), v, (row, 1), T::zero(), o, (d as isize, 1));
            }
        }
        let mut value = crate::numerics::Tensor::new(vec![dims.b, t, d], out)?;
        value.requires_grad = self.requires_grad(qkv);
        Ok(self.push(value, Op::Attention { qkv, dims, probs, scale }))
    }

    pub(crate) fn attention_backward(&self, qkv: Var, dims: AttnDims, probs: &[T], scale: T, g: &[T], gx: &mut [T]) {
        let (t, dh, d) = (dims.t, dims.dh, dims.d());
        let row = (3 * d) as isize;
        let src = self.data(qkv);
        let mut dp = vec![T::zero(); t * t];
        for bi in 0..dims.b {
            for h in 0..dims.heads {
                let p = &probs[(bi * dims.heads + h) * t * t..][..t * t];
                let go = &g[bi * t * d + h * dh..];
                let (qo, ko, vo) = (dims.part(bi, h, 0), dims.part(bi, h, 1), dims.part(bi, h, 2));
                // dV += P^T dO
                T::gemm(t, t, dh, T::one(), p, (1, t as isize), go, (d as isize, 1), T::one(), &mut gx[vo..], (row, 1));
                // dP = dO V^T
                T::gemm(t, dh, t, T::one(), go, (d as isize, 1), &src[vo..], (1, row), T::zero(), &mut dp, (t as isize, 1));
                // dS = P * (dP - rowsum(dP * P))
                for (prow, drow) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                    let dot = prow.iter().zip(drow.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ += scale dS K ; dK += scale dS^T Q
                T::gemm(t, t, dh, scale, &dp, (t as isize, 1), &src[ko..], (row, 1), T::one(), &mut gx[qo..], (row, 1));
                T::gemm(t, t, dh, scale, &dp, (1, t as isize), &src[qo..], (row, 1), T::one(), &mut gx[ko..], (row, 1));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};

    /// Reference built from primitive ops.
    fn unfused(tape: &mut Tape<f64>, qkv: Var, heads: usize) -> Result<Var> {
        let s = tape.shape(qkv).to_vec();
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let mut part = |off: usize| -> Result<Var> {
            let x = tape.slice(qkv, 2, off, d)?;
            let x = tape.reshape(x, &[b, t, heads, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, t, dh])
        };
        let (q, k, v) = (part(0)?, part(d)?, part(2 * d)?);
        let sc = tape.bmm(q, k, true)?;
        let sc = tape.scale(sc, 1.0 / (dh as f64).sqrt());
        let p = tape.softmax_last(sc)?;
        let o = tape.bmm(p, v, false)?;
        let o = tape.reshape(o, &[b, heads, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        tape.reshape(o, &[b, t, d])
    }

    fn random_qkv(seed: u64, b: usize, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([b, t, 3 * d], (0..b * t * 3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_unfused_composition() {
        let x = random_qkv(3, 2, 5, 8);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let a = tape.multi_head_attention(v, 2).unwrap();
        let r = unfused(&mut tape, v, 2).unwrap();
        for (p, q) in tape.data(a).iter().zip(tape.data(r)) {
            assert!((p - q).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let x = random_qkv(seed, 2, 4, 6);
            let w: Vec<f64> = (0..2 * 4 * 6).map(|i| ((i * 5 + 1) % 7) as f64 - 3.0).collect();
            let err = grad_check(
                |tape, v| {
                    let a = tape.multi_head_attention(v, 3)?;
                    let w = tape.constant(Tensor::new([2, 4, 6], w.clone())?);
                    let p = tape.mul(a, w)?;
                    Ok(tape.sum(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {}: {}", seed, err);
        }
    }

    #[test]
    fn rejects_bad_packing() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros([1, 2, 7]));
        assert!(tape.multi_head_attention(v, 2).is_err());
    }
}
