//! Cross-modality transformer (CMTR) for visible-infrared retrieval.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the element type used by the experiment tooling.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{CmtrError, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Model64 = model::Cmtr<f64>;
pub type Model32 = model::Cmtr<f32>;
