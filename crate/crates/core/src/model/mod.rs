//! The CMTR network: overlapping patch tokens, additive position and
//! modality embeddings, a pre-norm transformer encoder, the class-token
//! feature, the BN neck and the identity classifier.

mod backbone;
mod checkpoint;
mod config;
mod image;

pub use backbone::{trunc_normal, Affine, BlockIds, Cmtr, EmbeddingIds, ForwardOutput, Linear, NeckMode, NeckStats};
pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::{seq_len, ModelConfig, PatchConfig};
pub use image::{batch_patches, extract_patches, Image, ModalityTag, CHANNELS};
