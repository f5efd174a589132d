//! Train a model (or load one trained by the `train_model` example) and
//! measure how close the decoder Jacobian Gram matrix is to the constant
//! the objective predicts, including the lambda2 = 0 ablation.
//!
//!     cargo run --release --example isometry_report -- [steps]

use iqdz::synth::training_patches;
use iqdz::training::{isometry_check, train, TrainConfig};

fn main() -> iqdz::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10_000);

    let cfg = TrainConfig {
        steps,
        seed: 7,
        ..TrainConfig::default()
    };
    let dataset = training_patches(4096, cfg.patch_size, cfg.channels, cfg.seed);
    let samples = training_patches(32, cfg.patch_size, cfg.channels, 555);

    eprintln!("training with lambda2 = {} ...", cfg.lambda2);
    let (model, _) = train(&dataset, &cfg)?;
    let report = isometry_check(&model, &samples, &cfg)?;
    println!(
        "trained:  mean_diag {:.2} (expected {:.1}), max offdiag ratio {:.4}, sigma^2 {:.6}",
        report.mean_diag, report.expected_c, report.max_offdiag_ratio, report.sigma_sq
    );

    let ablation = TrainConfig {
        lambda2: 0.0,
        ..cfg.clone()
    };
    eprintln!("training ablation with lambda2 = 0 ...");
    let (model0, _) = train(&dataset, &ablation)?;
    let report0 = isometry_check(&model0, &samples, &ablation)?;
    println!(
        "ablation: mean_diag {:.2} (expected {}), max offdiag ratio {:.4}",
        report0.mean_diag, report0.expected_c, report0.max_offdiag_ratio
    );
    Ok(())
}
