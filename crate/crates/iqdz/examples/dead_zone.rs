//! Visualize how the dead-zone quantizer carves the latent axis: bin
//! intervals, widths and reconstruction points for a few offsets.
//!
//!     cargo run --release --example dead_zone

use iqdz::quant::{dead_zone_quantize, dequantize, symbol_interval, QuantConfig};

fn main() -> iqdz::Result<()> {
    let q = 1.0;
    for offset in [0.5, 0.45, 0.4] {
        let cfg = QuantConfig::new(q, offset)?;
        println!("Q = {q}, offset = {offset}:");
        for s in -3..=3i64 {
            let (lo, hi) = symbol_interval(s, &cfg);
            println!(
                "  s {s:>2}: [{lo:>6.3}, {hi:>6.3})  width {:>5.3}  recon {:>6.3}",
                hi - lo,
                dequantize(s, &cfg)
            );
        }
        println!();
    }

    // A descending ramp of inputs through the offset-0.45 quantizer.
    let cfg = QuantConfig::new(1.0, 0.45)?;
    println!("quantizing a ramp at Q = 1, offset = 0.45 (dead zone is [-0.55, 0.55)):");
    for i in 0..9 {
        let y = -2.0 + 0.5 * i as f64;
        println!("  y {y:>5.2} -> s {:>2}", dead_zone_quantize(y, &cfg));
    }
    Ok(())
}
