//! Dense tensors with tape-based reverse-mode differentiation.

mod attention;
mod broadcast;
mod gradcheck;
mod ops;
mod params;
mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, CoordSelection, GradCheckReport};
pub use params::{ParamId, ParamStore, ParamVars};
pub use serialize::{read_tensor, write_tensor};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Floor applied to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    tape::softplus(x)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    tape::gelu(x)
}

/// Cosine similarity with both norms floored at [`NORM_EPS`].
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let na = a.iter().fold(T::zero(), |s, &x| s + x * x).sqrt().max(T::of(NORM_EPS));
    let nb = b.iter().fold(T::zero(), |s, &x| s + x * x).sqrt().max(T::of(NORM_EPS));
    dot / (na * nb)
}

/// `1 - cosine_similarity`, in `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    T::one() - cosine_similarity(a, b)
}

impl<T: Scalar> Tape<T> {
    /// Euclidean norm of each row of a `[R, D]` tensor, floored at [`NORM_EPS`].
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x);
        let ax = self.shape(sq).len() - 1;
        let ss = self.sum_axis(sq, ax)?;
        let n = self.sqrt(ss)?;
        Ok(self.clamp_min(n, T::of(NORM_EPS)))
    }

    /// Row-wise cosine similarity of two `[R, D]` tensors, giving `[R]`.
    pub fn cosine_similarity_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        let ax = self.shape(prod).len() - 1;
        let dot = self.sum_axis(prod, ax)?;
        let na = self.row_norms(a)?;
        let nb = self.row_norms(b)?;
        let denom = self.mul(na, nb)?;
        self.div(dot, denom)
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.shape(a).iter().product::<usize>();
        let a2 = self.reshape(a, &[1, d])?;
        let b2 = self.reshape(b, &[1, self.shape(b).iter().product()])?;
        let s = self.cosine_similarity_rows(a2, b2)?;
        self.reshape(s, &[])
    }
}
