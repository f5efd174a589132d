//! Encode and decode one image at a chosen step size, printing rate and
//! quality. Uses a quickly trained model and a synthetic image unless paths
//! are given.
//!
//!     cargo run --release --example roundtrip -- [q] [offset]

use iqdz::codec::{decode_image, encode_image};
use iqdz::metrics::{ms_ssim, msssim_db, psnr};
use iqdz::quant::QuantConfig;
use iqdz::synth::{fixture_images_of, training_patches_of, Corpus};
use iqdz::training::{train, TrainConfig};

fn main() -> iqdz::Result<()> {
    let mut args = std::env::args().skip(1);
    let q: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let offset: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.45);

    let corpus = Corpus::sparse(23);
    let cfg = TrainConfig {
        steps: 4000,
        seed: 23,
        latent_dim: 4,
        ..TrainConfig::default()
    };
    eprintln!("training a small model ({} steps)...", cfg.steps);
    let dataset = training_patches_of(&corpus, 4096, cfg.patch_size, cfg.channels);
    let (model, _) = train(&dataset, &cfg)?;

    let image = fixture_images_of(&corpus, 1, 192, 1).remove(0);
    let quant = QuantConfig::new(q, offset)?;
    let bytes = encode_image(&image, &model, &quant)?;
    let recon = decode_image(&bytes, &model)?;

    let bpp = 8.0 * bytes.len() as f64 / image.num_pixels() as f64;
    println!(
        "Q {q}, offset {offset}: {} bytes ({bpp:.4} bpp)",
        bytes.len()
    );
    println!("psnr      {:.4} dB", psnr(&image, &recon)?);
    println!("ms-ssim   {:.6} ({:.4} dB)", ms_ssim(&image, &recon)?, msssim_db(ms_ssim(&image, &recon)?));
    Ok(())
}
