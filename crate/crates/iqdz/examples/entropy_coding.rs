//! Entropy-coding path in isolation: build per-symbol probabilities from a
//! CDF and a dead-zone quantizer, turn them into an integer frequency
//! table, range-code a stream drawn from that distribution, and compare the
//! payload against its entropy.
//!
//!     cargo run --release --example entropy_coding

use iqdz::coder::{range_decode, range_encode, FREQ_TOTAL};
use iqdz::model::EntropyModel;
use iqdz::quant::{build_frequency_table, dead_zone_quantize, QuantConfig, SymbolPlane};
use iqdz::rng::Rng;

fn main() -> iqdz::Result<()> {
    // Freshly initialized entropy model: every channel is the logistic CDF.
    let em = EntropyModel::init(1, 3);
    let cfg = QuantConfig::new(0.5, 0.45)?;
    let (s_min, s_max) = (-16i64, 16);
    let table = build_frequency_table(|y| em.cdf(0, y), s_min, s_max, &cfg, 0.0)?;
    println!("frequency table over [{s_min}, {s_max}], total {FREQ_TOTAL}:");
    for s in s_min..=s_max {
        if table.freq(s) > 400 {
            println!("  s {s:>3}: freq {:>6} ({:.4} bits)", table.freq(s), table.bits_of(s));
        }
    }

    // Draw latents from a logistic-ish source, quantize, code.
    let mut rng = Rng::new(42);
    let count = 50_000;
    let symbols: Vec<i64> = (0..count)
        .map(|_| {
            let u: f64 = rng.next_f64().clamp(1e-12, 1.0 - 1e-12);
            let y = (u / (1.0 - u)).ln(); // logistic sample
            dead_zone_quantize(y, &cfg).clamp(s_min, s_max)
        })
        .collect();
    let plane = SymbolPlane {
        n_units: count,
        n_channels: 1,
        symbols: symbols.clone(),
    };
    let payload = range_encode(&plane, std::slice::from_ref(&table))?;
    let ideal_bits: f64 = symbols.iter().map(|&s| table.bits_of(s)).sum();
    let actual_bits = 8.0 * payload.len() as f64;
    println!("{count} symbols:");
    println!("  entropy under the table: {:.1} bits ({:.4} bits/symbol)", ideal_bits, ideal_bits / count as f64);
    println!("  payload:                 {:.1} bits ({:.4} bits/symbol)", actual_bits, actual_bits / count as f64);
    println!("  overhead:                {:.4}%", 100.0 * (actual_bits - ideal_bits) / ideal_bits);

    let back = range_decode(&payload, std::slice::from_ref(&table), count)?;
    println!("  lossless: {}", back == symbols);
    Ok(())
}
