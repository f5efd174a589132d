//! Sweep one trained model over the full (offset, Q) grid and print the
//! rate-distortion table as CSV. The same data is what `iqdz rdsweep`
//! writes to a file.
//!
//!     cargo run --release --example rate_sweep > rd.csv

use iqdz::codec::{rd_csv, rd_sweep_default};
use iqdz::synth::{fixture_images_of, training_patches_of, Corpus};
use iqdz::training::{train, TrainConfig};

fn main() -> iqdz::Result<()> {
    let corpus = Corpus::sparse(23);
    let cfg = TrainConfig {
        steps: 10_000,
        seed: 23,
        latent_dim: 4,
        ..TrainConfig::default()
    };
    eprintln!("training ({} steps)...", cfg.steps);
    let dataset = training_patches_of(&corpus, 4096, cfg.patch_size, cfg.channels);
    let (model, _) = train(&dataset, &cfg)?;

    let fixtures = fixture_images_of(&corpus, 6, 192, 1);
    eprintln!("sweeping {} images over 33 grid points...", fixtures.len());
    let points = rd_sweep_default(&fixtures, &model)?;
    print!("{}", rd_csv(&points));
    Ok(())
}
