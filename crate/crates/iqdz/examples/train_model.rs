//! Train a small grayscale model on the built-in synthetic corpus and save
//! it next to a CSV training log.
//!
//!     cargo run --release --example train_model -- [steps] [seed]

use iqdz::synth::training_patches;
use iqdz::training::{train, TrainConfig};

fn main() -> iqdz::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let dataset = training_patches(4096, cfg.patch_size, cfg.channels, seed);
    eprintln!(
        "training {}x{} patches, latent dim {}, {} steps",
        cfg.patch_size, cfg.patch_size, cfg.latent_dim, cfg.steps
    );
    let t0 = std::time::Instant::now();
    let (model, log) = train(&dataset, &cfg)?;
    eprintln!("trained in {:.1?}", t0.elapsed());

    let first = log.median_loss(0..100.min(log.rows.len()));
    let last = log.median_loss(log.rows.len().saturating_sub(100)..log.rows.len());
    eprintln!("median loss: first 100 steps {first:.4}, last 100 steps {last:.4}");
    for r in log.rows.iter().rev().take(1) {
        eprintln!(
            "final parts: rate {:.3} bits, d1 {:.3}, d2 {:.5}",
            r.rate_bits, r.d1, r.d2
        );
    }

    model.save(std::path::Path::new("toy_model.iqdzm"))?;
    std::fs::write("train_log.csv", log.to_csv())?;
    eprintln!("wrote toy_model.iqdzm and train_log.csv");
    Ok(())
}
