//! Procedural two-modality identities.
//!
//! Each identity owns a scalar "pattern" field over the image (body bands,
//! oriented stripes, a few blobs). Visible images colour that field through an
//! identity palette sorted by luminance; infrared images map the same field
//! through a fixed nonlinearity to a single intensity, repeated on all three
//! channels. Palette colours therefore carry no information across modalities
//! while the pattern does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{derive_seed, Dataset, Split};
use crate::error::{ensure, Result};
use crate::model::{Image, ModalityTag, CHANNELS};

/// Smallest accepted image side (twice the default patch size).
pub const MIN_SIDE: usize = 16;

/// Per-image perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Maximum translation in pixels, both axes.
    pub max_shift: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { max_shift: 2.0, brightness: 0.15, noise: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

/// Procedural description of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentitySpec {
    pub identity: usize,
    pub pattern_seed: u64,
    /// Stripe cycles over the image height.
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_amp: f64,
    pub stripe_phase: f64,
    pub blob_count: usize,
    /// Three RGB colours ordered by increasing luminance.
    pub palette: [[f64; 3]; 3],
    pub jitter: Jitter,
    bands: Vec<(f64, f64)>,
    blobs: Vec<Blob>,
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl SyntheticIdentitySpec {
    pub fn new(identity: usize, pattern_seed: u64, jitter: Jitter) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
        let n_bands = rng.gen_range(3..=5);
        let mut cuts: Vec<f64> = (0..n_bands - 1).map(|_| rng.gen_range(0.1..0.9)).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.push(1.0);
        let bands = cuts.into_iter().map(|end| (end, rng.gen_range(0.05..0.95))).collect();
        let blob_count = rng.gen_range(1..=3);
        let blobs = (0..blob_count)
            .map(|_| Blob {
                cy: rng.gen_range(0.1..0.9),
                cx: rng.gen_range(0.15..0.85),
                sigma: rng.gen_range(0.08..0.18),
                amp: rng.gen_range(-0.45..0.45),
            })
            .collect();
        let mut palette: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)));
        palette.sort_by(|a, b| luminance(a).total_cmp(&luminance(b)));
        SyntheticIdentitySpec {
            identity,
            pattern_seed,
            stripe_freq: rng.gen_range(1.5..5.0),
            stripe_angle: rng.gen_range(-0.6..0.6),
            stripe_amp: rng.gen_range(0.1..0.3),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            blob_count,
            palette,
            jitter,
            bands,
            blobs,
        }
    }

    /// Pattern value in `[0, 1]` at normalised coordinates (`v` down, `u` across).
    pub fn pattern(&self, v: f64, u: f64) -> f64 {
        let level = self.bands.iter().find(|(end, _)| v < *end).or(self.bands.last()).map_or(0.5, |b| b.1);
        let (s, c) = self.stripe_angle.sin_cos();
        let t = v * c + 0.5 * u * s;
        let stripes = self.stripe_amp * (std::f64::consts::TAU * self.stripe_freq * t + self.stripe_phase).sin();
        let blobs: f64 = self
            .blobs
            .iter()
            .map(|b| {
                let d2 = (v - b.cy).powi(2) + (u - b.cx).powi(2);
                b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum();
        (level + stripes + blobs).clamp(0.0, 1.0)
    }

    fn colour(&self, p: f64) -> [f64; 3] {
        let (lo, hi, t) = if p < 0.5 { (0, 1, p * 2.0) } else { (1, 2, (p - 0.5) * 2.0) };
        std::array::from_fn(|ch| self.palette[lo][ch] * (1.0 - t) + self.palette[hi][ch] * t)
    }

    /// Infrared response of a pattern value.
    pub fn thermal(p: f64) -> f64 {
        0.1 + 0.8 * p.powf(0.7)
    }

    /// Renders one image; all randomness comes from `image_seed`.
    pub fn render(&self, modality: ModalityTag, h: usize, w: usize, image_seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        let j = self.jitter;
        let (dy, dx) = if j.max_shift > 0.0 {
            (rng.gen_range(-j.max_shift..=j.max_shift), rng.gen_range(-j.max_shift..=j.max_shift))
        } else {
            (0.0, 0.0)
        };
        let gain = if j.brightness > 0.0 { rng.gen_range(1.0 - j.brightness..=1.0 + j.brightness) } else { 1.0 };
        let noise = Normal::new(0.0, j.noise.max(0.0)).expect("finite noise level");
        let plane = h * w;
        let mut pixels = vec![0.0; CHANNELS * plane];
        for y in 0..h {
            for x in 0..w {
                let v = (y as f64 + 0.5 + dy) / h as f64;
                let u = (x as f64 + 0.5 + dx) / w as f64;
                let p = self.pattern(v, u);
                let at = y * w + x;
                match modality {
                    ModalityTag::Visible => {
                        let c = self.colour(p);
                        for ch in 0..CHANNELS {
                            let n = if j.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            pixels[ch * plane + at] = (c[ch] * gain + n).clamp(0.0, 1.0);
                        }
                    }
                    ModalityTag::Infrared => {
                        let n = if j.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        let i = (Self::thermal(p) * gain + n).clamp(0.0, 1.0);
                        for ch in 0..CHANNELS {
                            pixels[ch * plane + at] = i;
                        }
                    }
                }
            }
        }
        Image { height: h, width: w, pixels, modality, identity: self.identity }
    }
}

/// Pattern seed of a global identity under a dataset seed.
pub fn identity_pattern_seed(seed: u64, identity: usize) -> u64 {
    derive_seed(seed, &[0x1d, identity as u64])
}

/// Renders identities `first_id .. first_id + num_ids`, `per_modality` images
/// of each modality per identity, ordered by identity, then modality, then index.
pub fn synth_identities(
    first_id: usize,
    num_ids: usize,
    per_modality: usize,
    img_h: usize,
    img_w: usize,
    seed: u64,
    jitter: Jitter,
    split: Split,
) -> Result<Dataset> {
    ensure!(num_ids >= 1, "synthetic dataset needs at least one identity");
    ensure!(per_modality >= 1, "need at least one image per modality");
    ensure!(
        img_h >= MIN_SIDE && img_w >= MIN_SIDE,
        "image {}x{} is degenerate; both sides must be >= {}",
        img_h,
        img_w,
        MIN_SIDE
    );
    let mut images = Vec::with_capacity(num_ids * per_modality * 2);
    for identity in first_id..first_id + num_ids {
        let spec = SyntheticIdentitySpec::new(identity, identity_pattern_seed(seed, identity), jitter);
        for m in ModalityTag::ALL {
            for k in 0..per_modality {
                let image_seed = derive_seed(seed, &[identity as u64, m.index() as u64, k as u64]);
                images.push(spec.render(m, img_h, img_w, image_seed));
            }
        }
    }
    Ok(Dataset { split, images })
}

/// Training-style dataset with labels `0 .. num_ids`.
pub fn synth_generate(num_ids: usize, per_modality: usize, img_h: usize, img_w: usize, seed: u64) -> Result<Dataset> {
    ensure!(num_ids >= 2, "synth_generate: need at least 2 identities, got {}", num_ids);
    synth_identities(0, num_ids, per_modality, img_h, img_w, seed, Jitter::default(), Split::Train)
}
