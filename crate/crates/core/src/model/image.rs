use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::config::{seq_len, PatchConfig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Visible,
    Infrared,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 2] = [ModalityTag::Visible, ModalityTag::Infrared];

    /// 0 for visible, 1 for infrared.
    pub fn index(self) -> usize {
        match self {
            ModalityTag::Visible => 0,
            ModalityTag::Infrared => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            ModalityTag::Visible => ModalityTag::Infrared,
            ModalityTag::Infrared => ModalityTag::Visible,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::Visible => "visible",
            ModalityTag::Infrared => "infrared",
        }
    }
}

impl std::fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModalityTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "visible" | "vis" => Ok(ModalityTag::Visible),
            "infrared" | "ir" => Ok(ModalityTag::Infrared),
            other => Err(format!("unknown modality {:?}", other)),
        }
    }
}

/// Three-channel image, channel-major then row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub modality: ModalityTag,
    pub identity: usize,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, modality: ModalityTag, identity: usize) -> Result<Self> {
        ensure!(
            pixels.len() == CHANNELS * height * width,
            "image {}x{} needs {} values, got {}",
            height,
            width,
            CHANNELS * height * width,
            pixels.len()
        );
        Ok(Image { height, width, pixels, modality, identity })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Converts to a `[3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64([CHANNELS, self.height, self.width], &self.pixels).expect("validated image")
    }
}

/// Flattened overlapping patches, `[N, C * P * P]`.
///
/// Anchors run row-major over `(0, S, 2S, ..)` in both directions; each patch
/// is flattened channel-major, then row-major inside the patch.
pub fn extract_patches<T: Scalar>(img: &Image, cfg: &PatchConfig) -> Result<Tensor<T>> {
    let (p, s) = (cfg.patch_size, cfg.stride);
    let n = seq_len(img.height, img.width, p, s)?;
    let mut out = Vec::with_capacity(n * CHANNELS * p * p);
    append_patches(img, p, s, &mut out);
    Tensor::new([n, CHANNELS * p * p], out)
}

pub(crate) fn append_patches<T: Scalar>(img: &Image, p: usize, s: usize, out: &mut Vec<T>) {
    let rows = (img.height - p) / s + 1;
    let cols = (img.width - p) / s + 1;
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * s, c * s);
            for ch in 0..CHANNELS {
                for dy in 0..p {
                    let base = (ch * img.height + y0 + dy) * img.width + x0;
                    out.extend(img.pixels[base..base + p].iter().map(|&v| T::of(v)));
                }
            }
        }
    }
}

/// Patches for a batch of images, `[B, N, C * P * P]`.
pub fn batch_patches<T: Scalar>(images: &[&Image], cfg: &PatchConfig) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| crate::CmtrError::contract("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let n = seq_len(h, w, cfg.patch_size, cfg.stride)?;
    let pd = CHANNELS * cfg.patch_size * cfg.patch_size;
    let mut out = Vec::with_capacity(images.len() * n * pd);
    for img in images {
        ensure!(img.height == h && img.width == w, "batch mixes image sizes");
        append_patches(img, cfg.patch_size, cfg.stride, &mut out);
    }
    Tensor::new([images.len(), n, pd], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let pixels = (0..CHANNELS * h * w).map(|i| i as f64 / (CHANNELS * h * w) as f64).collect();
        Image::new(h, w, pixels, ModalityTag::Visible, 0).unwrap()
    }

    #[test]
    fn single_patch_is_whole_image() {
        let img = ramp(16, 16);
        let cfg = PatchConfig { patch_size: 16, stride: 8, embed_dim: 4 };
        let p: Tensor<f64> = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 768]);
        assert_eq!(p.data(), img.pixels.as_slice());
    }

    #[test]
    fn vertical_overlap_shares_rows() {
        let img = ramp(24, 16);
        let cfg = PatchConfig { patch_size: 16, stride: 8, embed_dim: 4 };
        let p: Tensor<f64> = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[2, 768]);
        // brute-force index oracle: patch k covers rows 8k..8k+16
        for k in 0..2 {
            for ch in 0..3 {
                for dy in 0..16 {
                    for dx in 0..16 {
                        let got = p.row(k)[(ch * 16 + dy) * 16 + dx];
                        assert_eq!(got, img.at(ch, 8 * k + dy, dx));
                    }
                }
            }
        }
        // rows 8..15 appear in both patches
        for ch in 0..3 {
            for dy in 8..16 {
                for dx in 0..16 {
                    assert_eq!(p.row(0)[(ch * 16 + dy) * 16 + dx], p.row(1)[(ch * 16 + dy - 8) * 16 + dx]);
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = Image::new(12, 12, vec![0.25; 3 * 144], ModalityTag::Infrared, 1).unwrap();
        let cfg = PatchConfig { patch_size: 4, stride: 2, embed_dim: 4 };
        let p: Tensor<f64> = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape()[0], 25);
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_overlapping_patches_tile_the_image() {
        let img = ramp(12, 8);
        let cfg = PatchConfig { patch_size: 4, stride: 4, embed_dim: 4 };
        let p: Tensor<f64> = extract_patches(&img, &cfg).unwrap();
        let mut rebuilt = vec![f64::NAN; img.pixels.len()];
        for (k, row) in (0..p.shape()[0]).map(|k| (k, p.row(k))) {
            let (r, c) = (k / 2, k % 2);
            for ch in 0..3 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        rebuilt[(ch * 12 + r * 4 + dy) * 8 + c * 4 + dx] = row[(ch * 4 + dy) * 4 + dx];
                    }
                }
            }
        }
        assert_eq!(rebuilt, img.pixels);
    }

    #[test]
    fn modality_parse() {
        assert_eq!("ir".parse::<ModalityTag>().unwrap(), ModalityTag::Infrared);
        assert_eq!(ModalityTag::Visible.other(), ModalityTag::Infrared);
        assert!("rgb".parse::<ModalityTag>().is_err());
    }
}
