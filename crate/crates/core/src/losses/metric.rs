use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{cosine_distance, Tape, Var};
use crate::scalar::Scalar;

/// Threshold of the smooth-L1 distance.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Distance between a feature and its center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 - cos(a, b)`, in `[0, 2]`.
    Cosine,
    L1,
    /// Euclidean norm of the difference.
    L2,
    /// Elementwise Huber-style distance with `beta = 1`, summed.
    SmoothL1,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 4] =
        [DistanceMetric::L1, DistanceMetric::L2, DistanceMetric::SmoothL1, DistanceMetric::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
            DistanceMetric::SmoothL1 => "smooth_l1",
        }
    }

    /// Row-wise distances between `a` and `b`, both `[R, D]`; returns `[R]`.
    pub fn rows<T: Scalar>(self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        if self == DistanceMetric::Cosine {
            let sim = tape.cosine_similarity_rows(a, b)?;
            let neg = tape.neg(sim);
            return Ok(tape.add_scalar(neg, T::one()));
        }
        let diff = tape.sub(a, b)?;
        let ax = tape.shape(diff).len() - 1;
        let per = match self {
            DistanceMetric::L1 => tape.abs(diff),
            DistanceMetric::L2 => tape.square(diff),
            DistanceMetric::SmoothL1 => tape.smooth_l1(diff, T::of(SMOOTH_L1_BETA))?,
            DistanceMetric::Cosine => unreachable!(),
        };
        let summed = tape.sum_axis(per, ax)?;
        match self {
            DistanceMetric::L2 => tape.sqrt(summed),
            _ => Ok(summed),
        }
    }

    /// Plain evaluation on two vectors.
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        let pairs = a.iter().zip(b).map(|(&x, &y)| x - y);
        match self {
            DistanceMetric::Cosine => cosine_distance(a, b),
            DistanceMetric::L1 => pairs.fold(T::zero(), |s, d| s + d.abs()),
            DistanceMetric::L2 => pairs.fold(T::zero(), |s, d| s + d * d).sqrt(),
            DistanceMetric::SmoothL1 => {
                let beta = T::of(SMOOTH_L1_BETA);
                let half = T::of(0.5);
                pairs.fold(T::zero(), |s, d| {
                    let a = d.abs();
                    s + if a < beta { half * a * a / beta } else { a - half * beta }
                })
            }
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "l1" => Ok(DistanceMetric::L1),
            "l2" => Ok(DistanceMetric::L2),
            "smooth_l1" => Ok(DistanceMetric::SmoothL1),
            other => Err(format!("unknown distance metric {:?}", other)),
        }
    }
}
