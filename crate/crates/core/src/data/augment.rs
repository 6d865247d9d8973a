use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `(min, max)`.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, erase_prob: 0.5, erase_area: (0.02, 0.4) }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { flip_prob: 0.0, erase_prob: 0.0, erase_area: (0.02, 0.4) }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.flip_prob), "flip_prob outside [0, 1]");
        ensure!((0.0..=1.0).contains(&self.erase_prob), "erase_prob outside [0, 1]");
        let (lo, hi) = self.erase_area;
        ensure!(0.0 < lo && lo <= hi && hi <= 1.0, "erase_area must satisfy 0 < min <= max <= 1");
        Ok(())
    }
}

/// Mirrors the image left to right.
pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

/// Rectangle `(top, left, height, width)` covering exactly
/// `floor(fraction * H * W)` pixels when such a rectangle fits; otherwise the
/// largest smaller area that does.
pub fn erase_rect<R: Rng>(h: usize, w: usize, fraction: f64, rng: &mut R) -> (usize, usize, usize, usize) {
    let mut target = ((fraction * (h * w) as f64).floor() as usize).clamp(1, h * w);
    loop {
        let shapes: Vec<(usize, usize)> =
            (1..=h).filter(|rh| target % rh == 0 && target / rh <= w).map(|rh| (rh, target / rh)).collect();
        if !shapes.is_empty() {
            let (rh, rw) = shapes[rng.gen_range(0..shapes.len())];
            let top = rng.gen_range(0..=h - rh);
            let left = rng.gen_range(0..=w - rw);
            return (top, left, rh, rw);
        }
        target -= 1;
    }
}

/// Fills a rectangle with the per-channel `fill` values.
pub fn erase(img: &mut Image, rect: (usize, usize, usize, usize), fill: [f64; 3]) {
    let (top, left, rh, rw) = rect;
    for (c, &v) in fill.iter().enumerate() {
        for y in top..top + rh {
            for x in left..left + rw {
                *img.at_mut(c, y, x) = v;
            }
        }
    }
}

/// Random horizontal flip followed by random erasing with `fill`
/// (normally the per-channel dataset mean).
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, fill: [f64; 3], rng: &mut R) -> Image {
    let mut out = if rng.gen_bool(cfg.flip_prob) { flip_horizontal(img) } else { img.clone() };
    if rng.gen_bool(cfg.erase_prob) {
        let (lo, hi) = cfg.erase_area;
        let fraction = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let rect = erase_rect(out.height, out.width, fraction, rng);
        erase(&mut out, rect, fill);
    }
    out
}

/// [`augment`] driven by a seed.
pub fn augment_seeded(img: &Image, cfg: &AugmentConfig, fill: [f64; 3], seed: u64) -> Image {
    augment(img, cfg, fill, &mut ChaCha8Rng::seed_from_u64(seed))
}
