//! Seeded synthetic images: sums of random-frequency 2-D sinusoids plus
//! smoothed noise. Used as the built-in training corpus and as fixture
//! material for sweeps and metric tests.
//!
//! The sinusoid frequencies are drawn once per corpus seed and shared by
//! every image of that corpus; per-image randomness is in the phases,
//! per-wave amplitudes and the noise. Patches of one corpus therefore span
//! a low-dimensional subspace (two dimensions per wave plus the noise
//! floor), so a small latent code can represent them fully - the desk-scale
//! stand-in for a photographic corpus whose spectrum a real encoder would
//! exploit.

use crate::image::Image;
use crate::rng::Rng;

/// The wave family of one corpus: frequencies fixed per seed.
#[derive(Clone, Debug)]
pub struct Corpus {
    freqs: Vec<(f64, f64)>,
    amp_lo: f64,
    amp_hi: f64,
    seed: u64,
}

impl Corpus {
    /// Standard corpus: eight waves of moderate amplitude, filling a
    /// 16-dimensional patch subspace.
    pub fn new(seed: u64) -> Corpus {
        Corpus::with_waves(seed, 8, 0.10, 0.16)
    }

    /// Sparse corpus: a few strong waves, so per-dimension latent spreads
    /// are large relative to the quantization sweep.
    pub fn sparse(seed: u64) -> Corpus {
        Corpus::with_waves(seed, 2, 0.24, 0.38)
    }

    /// Draw a corpus wave family. Frequencies are in cycles per pixel
    /// (so patch statistics do not depend on image size), spread over
    /// roughly 0.3 to 2.8 cycles per 8 px patch with a minimum separation
    /// so each wave occupies its own spectral cell.
    pub fn with_waves(seed: u64, n_waves: usize, amp_lo: f64, amp_hi: f64) -> Corpus {
        let mut rng = Rng::new(seed ^ CORPUS_SEED_TWEAK);
        let mut freqs: Vec<(f64, f64)> = Vec::new();
        let mut attempts = 0;
        while freqs.len() < n_waves {
            attempts += 1;
            let sep = if attempts < 500 { 0.086 } else { 0.05 };
            let f = (0.042 + 0.30 * rng.next_f64().sqrt()).min(0.345);
            let theta = rng.uniform(0.0, std::f64::consts::FRAC_PI_2);
            let cand = (f * theta.cos(), f * theta.sin());
            let ok = freqs
                .iter()
                .all(|&(fx, fy)| ((fx - cand.0).powi(2) + (fy - cand.1).powi(2)).sqrt() > sep);
            if ok {
                freqs.push(cand);
            }
        }
        Corpus {
            freqs,
            amp_lo,
            amp_hi,
            seed,
        }
    }

    /// One [0,1] field: the corpus waves with image-specific phases and
    /// amplitudes, plus a bilinearly smoothed noise grid.
    pub fn field(&self, width: usize, height: usize, rng: &mut Rng) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        // Three independently-phased waves per spectral cell, with a small
        // frequency jitter: cell coefficients then sum several phasors and
        // their patch marginals come out bell-shaped rather than arcsine.
        let mut comps: Vec<(f64, f64, f64, f64)> = Vec::new();
        for &(fx, fy) in &self.freqs {
            for _ in 0..2 {
                comps.push((
                    fx + rng.uniform(-0.006, 0.006),
                    fy + rng.uniform(-0.006, 0.006),
                    rng.uniform(0.0, tau),
                    rng.uniform(self.amp_lo, self.amp_hi) * 0.707 * rng.uniform(0.8, 1.2),
                ));
            }
        }
        let step = 4usize;
        let gw = width / step + 2;
        let gh = height / step + 2;
        let noise_amp = rng.uniform(0.015, 0.03);
        let grid: Vec<f64> = (0..gw * gh)
            .map(|_| rng.uniform(-noise_amp, noise_amp))
            .collect();

        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64, y as f64);
                let mut val = 0.5;
                for &(fx, fy, phase, amp) in &comps {
                    val += amp * (tau * (fx * u + fy * v) + phase).sin();
                }
                let gx = x as f64 / step as f64;
                let gy = y as f64 / step as f64;
                let (ix, iy) = (gx as usize, gy as usize);
                let (tx, ty) = (gx - ix as f64, gy - iy as f64);
                let g00 = grid[iy * gw + ix];
                let g10 = grid[iy * gw + ix + 1];
                let g01 = grid[(iy + 1) * gw + ix];
                let g11 = grid[(iy + 1) * gw + ix + 1];
                val += g00 * (1.0 - tx) * (1.0 - ty)
                    + g10 * tx * (1.0 - ty)
                    + g01 * (1.0 - tx) * ty
                    + g11 * tx * ty;
                out.push(val.clamp(0.0, 1.0));
            }
        }
        out
    }

    /// A corpus image with 1 or 3 channels. Color channels share a common
    /// luminance field with smaller chroma offset fields.
    pub fn image(&self, width: usize, height: usize, channels: usize, index: u64) -> Image {
        let mut rng = Rng::new(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5);
        let base = self.field(width, height, &mut rng);
        let pixels = if channels == 1 {
            base.iter().map(|&v| (v * 255.0).round() as u8).collect()
        } else {
            let ca = self.field(width, height, &mut rng);
            let cb = self.field(width, height, &mut rng);
            let mut px = Vec::with_capacity(width * height * 3);
            for i in 0..width * height {
                let l = base[i];
                let (da, db) = (0.3 * (ca[i] - 0.5), 0.3 * (cb[i] - 0.5));
                for v in [l + da, l, l + db] {
                    px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            px
        };
        Image::new(width, height, channels, pixels).unwrap()
    }
}

// Keeps corpus-level draws decorrelated from per-image streams.
const CORPUS_SEED_TWEAK: u64 = 0x5EED_0C0D_EC11_77AA;

/// Corpus image by seed; index differentiates images of one corpus.
pub fn synth_image(width: usize, height: usize, channels: usize, seed: u64) -> Image {
    // A standalone image is its own single-image corpus.
    Corpus::new(seed).image(width, height, channels, 0)
}

/// Channel-planar [0,1] patch vector cut from an image at (x0, y0).
pub fn extract_patch(img: &Image, x0: usize, y0: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p * p * img.channels);
    for c in 0..img.channels {
        for dy in 0..p {
            for dx in 0..p {
                out.push(img.sample01(x0 + dx, y0 + dy, c));
            }
        }
    }
    out
}

/// Deterministic training corpus: `count` channel-planar patch vectors, all
/// drawn from the wave family of `seed`.
pub fn training_patches(count: usize, patch: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    training_patches_of(&Corpus::new(seed), count, patch, channels)
}

/// Training patches from an explicit corpus.
pub fn training_patches_of(
    corpus: &Corpus,
    count: usize,
    patch: usize,
    channels: usize,
) -> Vec<Vec<f64>> {
    let img_side = patch * 8;
    let mut out = Vec::with_capacity(count);
    let mut index = 0u64;
    while out.len() < count {
        let img = corpus.image(img_side, img_side, channels, index);
        index += 1;
        for py in 0..img_side / patch {
            for px in 0..img_side / patch {
                if out.len() == count {
                    break;
                }
                out.push(extract_patch(&img, px * patch, py * patch, patch));
            }
        }
    }
    out
}

/// Fixture image set for rate-distortion sweeps, drawn from the same wave
/// family as `training_patches` with the same seed.
pub fn fixture_images(count: usize, size: usize, channels: usize, seed: u64) -> Vec<Image> {
    fixture_images_of(&Corpus::new(seed), count, size, channels)
}

/// Fixture images from an explicit corpus.
pub fn fixture_images_of(corpus: &Corpus, count: usize, size: usize, channels: usize) -> Vec<Image> {
    (0..count)
        .map(|i| corpus.image(size, size, channels, 1_000_000 + i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_are_in_unit_range_and_textured() {
        let corpus = Corpus::new(8);
        let mut rng = Rng::new(8);
        let f = corpus.field(64, 64, &mut rng);
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64;
        assert!(var.sqrt() > 0.05, "field too flat: std {}", var.sqrt());
    }

    #[test]
    fn images_are_seed_deterministic() {
        let a = synth_image(32, 32, 3, 5);
        let b = synth_image(32, 32, 3, 5);
        assert_eq!(a, b);
        let c = synth_image(32, 32, 3, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_images_share_waves_but_differ() {
        let corpus = Corpus::new(5);
        let a = corpus.image(32, 32, 1, 0);
        let b = corpus.image(32, 32, 1, 1);
        assert_ne!(a, b);
    }

    #[test]
    fn patches_have_planar_layout() {
        let img = synth_image(16, 16, 3, 2);
        let p = extract_patch(&img, 4, 8, 4);
        assert_eq!(p.len(), 48);
        assert!((p[0] - img.sample01(4, 8, 0)).abs() < 1e-12);
        assert!((p[16] - img.sample01(4, 8, 1)).abs() < 1e-12);
        assert!((p[32] - img.sample01(4, 8, 2)).abs() < 1e-12);
    }

    #[test]
    fn corpus_size_is_exact() {
        let ps = training_patches(1100, 8, 1, 3);
        assert_eq!(ps.len(), 1100);
        assert!(ps.iter().all(|p| p.len() == 64));
    }

    #[test]
    fn fixtures_are_deterministic() {
        let a = fixture_images(2, 64, 1, 9);
        let b = fixture_images(2, 64, 1, 9);
        assert_eq!(a, b);
    }
}
