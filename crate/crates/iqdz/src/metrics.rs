//! Image quality metrics: MSE, PSNR, single-scale SSIM, 5-scale MS-SSIM and
//! the dB conversion used for reporting.
//!
//! Conventions, pinned for determinism:
//! - PSNR is computed on the 0-255 scale over all channels jointly;
//!   identical images report `+inf`.
//! - SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = (0.01*255)^2,
//!   C2 = (0.03*255)^2, valid-mode filtering, per channel then averaged.
//! - MS-SSIM uses the standard five scale weights
//!   (0.0448, 0.2856, 0.3001, 0.2363, 0.1333) with dyadic 2x2-mean
//!   downsampling; it needs min(width, height) >= 176 so the window fits at
//!   the coarsest scale.
//! - MS-SSIM dB is `-10*log10(1 - v)`, capped at 100 dB when `1 - v < 1e-10`.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest image side for the full 5-scale MS-SSIM (11 * 2^4).
pub const MSSSIM_MIN_DIM: usize = 176;

const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::Config(format!(
            "image dims differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean squared error on the 0-255 scale.
pub fn mse255(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    let mut acc = 0.0;
    for (&pa, &pb) in a.pixels.iter().zip(b.pixels.iter()) {
        let d = pa as f64 - pb as f64;
        acc += d * d;
    }
    Ok(acc / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse255(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((255.0 * 255.0) / mse).log10())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode convolution with a symmetric kernel.
fn filter_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Mean luminance*contrast*structure and mean contrast*structure of one
/// channel pair.
fn ssim_components(
    pa: &[f64],
    pb: &[f64],
    w: usize,
    h: usize,
    kernel: &[f64],
) -> (f64, f64) {
    let (mu_a, ow, oh) = filter_valid(pa, w, h, kernel);
    let (mu_b, _, _) = filter_valid(pb, w, h, kernel);
    let sq_a: Vec<f64> = pa.iter().map(|&v| v * v).collect();
    let sq_b: Vec<f64> = pb.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(&x, &y)| x * y).collect();
    let (m_aa, _, _) = filter_valid(&sq_a, w, h, kernel);
    let (m_bb, _, _) = filter_valid(&sq_b, w, h, kernel);
    let (m_ab, _, _) = filter_valid(&ab, w, h, kernel);

    let n = ow * oh;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        let lum = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    (ssim_sum / n as f64, cs_sum / n as f64)
}

/// 2x2 mean downsampling; odd trailing rows/columns are dropped.
fn downsample2(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let ow = w / 2;
    let oh = h / 2;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (x2, y2) = (x * 2, y * 2);
            out[y * ow + x] = 0.25
                * (plane[y2 * w + x2]
                    + plane[y2 * w + x2 + 1]
                    + plane[(y2 + 1) * w + x2]
                    + plane[(y2 + 1) * w + x2 + 1]);
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM in [0,1], averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut acc = 0.0;
    for c in 0..a.channels {
        let (s, _) = ssim_components(&a.plane255(c), &b.plane255(c), a.width, a.height, &kernel);
        acc += s;
    }
    Ok(acc / a.channels as f64)
}

/// 5-scale MS-SSIM in [0,1], per channel then averaged.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.width.min(a.height) < MSSSIM_MIN_DIM {
        return Err(Error::Config(format!(
            "image {}x{} too small for 5-scale MS-SSIM (need min dim >= {MSSSIM_MIN_DIM}); \
             use single-scale ssim instead",
            a.width, a.height
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let scales = MSSSIM_WEIGHTS.len();
    let mut total = 0.0;
    for c in 0..a.channels {
        let mut pa = a.plane255(c);
        let mut pb = b.plane255(c);
        let (mut w, mut h) = (a.width, a.height);
        let mut value = 1.0;
        for (scale, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let (s, cs) = ssim_components(&pa, &pb, w, h, &kernel);
            if scale + 1 == scales {
                value *= s.max(0.0).powf(weight);
            } else {
                value *= cs.max(0.0).powf(weight);
                let (na, nw, nh) = downsample2(&pa, w, h);
                let (nb, _, _) = downsample2(&pb, w, h);
                pa = na;
                pb = nb;
                w = nw;
                h = nh;
            }
        }
        total += value;
    }
    Ok(total / a.channels as f64)
}

/// dB scale for MS-SSIM style scores: -10*log10(1 - v), capped at 100 dB.
pub fn msssim_db(v: f64) -> f64 {
    let rem = 1.0 - v;
    if rem < 1e-10 {
        return 100.0;
    }
    -10.0 * rem.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(w: usize, h: usize, c: usize, rng: &mut Rng) -> Image {
        Image::new(w, h, c, (0..w * h * c).map(|_| (rng.next_u64() & 0xFF) as u8).collect())
            .unwrap()
    }

    /// Smooth test image so SSIM behaves like it does on photographs.
    fn smooth_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let (fx, fy) = (rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0));
        let phase = rng.uniform(0.0, 6.28);
        let px: Vec<u8> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
                let v = 0.5
                    + 0.3 * (6.283 * (fx * x + fy * y) + phase).sin()
                    + 0.15 * (6.283 * (fy * x - fx * y)).cos();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        Image::new(w, h, 1, px).unwrap()
    }

    fn add_noise(img: &Image, amp: f64, rng: &mut Rng) -> Image {
        let px = img
            .pixels
            .iter()
            .map(|&p| (p as f64 + rng.uniform(-amp, amp)).clamp(0.0, 255.0).round() as u8)
            .collect();
        Image::new(img.width, img.height, img.channels, px).unwrap()
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let mut rng = Rng::new(1);
        let a = random_image(16, 16, 3, &mut rng);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_full_scale_error_is_zero_db() {
        let a = Image::new(4, 4, 1, vec![0; 16]).unwrap();
        let b = Image::new(4, 4, 1, vec![255; 16]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_bruteforce_oracle() {
        // Oracle: naive per-sample double loop over (x, y, c).
        let mut rng = Rng::new(5);
        let a = random_image(13, 9, 3, &mut rng);
        let b = random_image(13, 9, 3, &mut rng);
        let mut acc = 0.0;
        for y in 0..a.height {
            for x in 0..a.width {
                for c in 0..a.channels {
                    let d = a.pixel(x, y, c) as f64 - b.pixel(x, y, c) as f64;
                    acc += d * d;
                }
            }
        }
        let mse = acc / (a.width * a.height * a.channels) as f64;
        let oracle = 10.0 * ((255.0f64 * 255.0) / mse).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn msssim_db_fixed_points() {
        assert!((msssim_db(0.9) - 10.0).abs() < 1e-12);
        assert!((msssim_db(0.99) - 20.0).abs() < 1e-12);
        assert_eq!(msssim_db(1.0), 100.0);
    }

    #[test]
    fn ms_ssim_identity_is_one() {
        let a = smooth_image(192, 192, 7);
        let v = ms_ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        assert_eq!(msssim_db(v), 100.0);
    }

    #[test]
    fn ms_ssim_small_image_is_config_error() {
        let a = smooth_image(64, 64, 3);
        match ms_ssim(&a, &a) {
            Err(Error::Config(m)) => assert!(m.contains("single-scale"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = Rng::new(17);
        let a = smooth_image(192, 192, 11);
        let b = add_noise(&a, 20.0, &mut rng);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(ms_ssim(&a, &b).unwrap(), ms_ssim(&b, &a).unwrap());
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_bounds() {
        let mut rng = Rng::new(23);
        let a = smooth_image(64, 64, 13);
        let b = add_noise(&a, 60.0, &mut rng);
        let v = ssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }

    #[test]
    fn noise_monotonically_degrades() {
        let a = smooth_image(192, 192, 29);
        let mut prev_psnr = f64::INFINITY;
        let mut prev_msssim = 1.0;
        for (i, amp) in [5.0, 15.0, 40.0, 90.0].iter().enumerate() {
            let mut rng = Rng::new(100 + i as u64);
            let noisy = add_noise(&a, *amp, &mut rng);
            let p = psnr(&a, &noisy).unwrap();
            let m = ms_ssim(&a, &noisy).unwrap();
            assert!(p < prev_psnr, "psnr {p} vs {prev_psnr} at amp {amp}");
            assert!(m < prev_msssim, "ms-ssim {m} vs {prev_msssim} at amp {amp}");
            prev_psnr = p;
            prev_msssim = m;
        }
    }

    #[test]
    fn dims_mismatch_rejected() {
        let a = smooth_image(32, 32, 1);
        let b = smooth_image(32, 16, 2);
        assert!(psnr(&a, &b).is_err());
    }
}
