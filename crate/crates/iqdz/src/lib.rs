//! iqdz: a single-model variable-rate lossy image codec.
//!
//! One autoencoder is trained so that its latent space is isometric to the
//! distortion metric; at inference a conventional dead-zone quantizer with
//! an arbitrary step size Q feeds a CDF-driven range coder, so the same
//! trained network serves an entire rate-distortion curve. The crate
//! provides the training loop, the quantizer/coder/bitstream stack, PGM/PPM
//! I/O, quality metrics, and a thin CLI over all of it.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability - training, encode/decode round trips, rate sweeps,
//! isometry reports, gradient audits, entropy coding - has one.

pub mod cli;
pub mod codec;
pub mod coder;
pub mod error;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
