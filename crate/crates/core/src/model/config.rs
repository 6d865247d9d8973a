use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Patch tokenisation settings: patch size `P`, stride `S`, embedding dim `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { patch_size: 8, stride: 4, embed_dim: 64 }
    }
}

/// Number of patch tokens for an `h x w` image:
/// `(floor((h - p) / s) + 1) * (floor((w - p) / s) + 1)`.
pub fn seq_len(h: usize, w: usize, p: usize, s: usize) -> Result<usize> {
    ensure!(p >= 1 && s >= 1 && s <= p, "seq_len: need 1 <= stride ({}) <= patch ({})", s, p);
    ensure!(h >= p && w >= p, "seq_len: image {}x{} smaller than patch {}", h, w, p);
    Ok(((h - p) / s + 1) * ((w - p) / s + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: PatchConfig,
    /// Transformer layers `L`; zero gives an identity encoder (no final norm).
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Identity classes seen by the main classifier.
    pub num_ids: usize,
    /// Learnable visible/infrared embeddings added to patch tokens.
    pub modality_embedding: bool,
    /// Also add the modality embedding to the class token.
    pub me_on_class_token: bool,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_h: 64,
            img_w: 32,
            patch: PatchConfig::default(),
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_ids: 20,
            modality_embedding: true,
            me_on_class_token: false,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        seq_len(self.img_h, self.img_w, self.patch.patch_size, self.patch.stride)?;
        ensure!(self.patch.embed_dim > 0, "embed_dim must be positive");
        ensure!(self.heads >= 1, "need at least one attention head");
        ensure!(
            self.patch.embed_dim % self.heads == 0,
            "embed_dim {} not divisible by heads {}",
            self.patch.embed_dim,
            self.heads
        );
        ensure!(self.mlp_ratio >= 1, "mlp_ratio must be >= 1");
        ensure!(self.num_ids >= 1, "num_ids must be >= 1");
        ensure!(self.ln_eps > 0.0 && self.bn_eps > 0.0, "normalisation eps must be positive");
        ensure!((0.0..=1.0).contains(&self.bn_momentum), "bn_momentum outside [0, 1]");
        ensure!(
            !self.me_on_class_token || self.modality_embedding,
            "me_on_class_token requires modality_embedding"
        );
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        seq_len(self.img_h, self.img_w, self.patch.patch_size, self.patch.stride).unwrap_or(0)
    }

    /// Length of one flattened patch, `C * P * P`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch.patch_size * self.patch.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.patch.embed_dim
    }
}
