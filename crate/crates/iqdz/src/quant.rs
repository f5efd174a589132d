//! Dead-zone quantizer, dequantizer, per-symbol intervals and frequency
//! table construction.
//!
//! The quantizer maps a centered latent `y` to the integer symbol
//! `sgn(y) * floor(|y|/Q + offset)` with `sgn(0) = 0`. `offset = 0.5`
//! degenerates to round-to-nearest; smaller offsets widen the zero bin to
//! `2*(1-offset)*Q` while every other bin keeps width `Q`. The per-symbol
//! interval bounds use the tie parameter `omega`; any value in (0,1) yields
//! the same partition, so it is fixed at 0.5.

use crate::coder::{FrequencyTable, FREQ_TOTAL};
use crate::error::{Error, Result};

/// The stock quantization step sweep.
pub const Q_SWEEP: [f64; 11] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 3.5, 4.0];

/// The stock dead-zone offset sweep.
pub const OFFSET_SWEEP: [f64; 3] = [0.4, 0.45, 0.5];

/// Step size, dead-zone offset and tie parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    pub q: f64,
    pub offset: f64,
    pub omega: f64,
}

impl QuantConfig {
    pub fn new(q: f64, offset: f64) -> Result<QuantConfig> {
        if !(q.is_finite() && q > 0.0) {
            return Err(Error::Config(format!("step size Q must be positive, got {q}")));
        }
        if !(offset > 0.0 && offset <= 0.5) {
            return Err(Error::Config(format!(
                "offset must lie in (0, 0.5], got {offset}"
            )));
        }
        Ok(QuantConfig {
            q,
            offset,
            omega: 0.5,
        })
    }

    /// Round Q and offset through f32 so that encoder-side arithmetic uses
    /// exactly the values a decoder will read back from the header.
    pub fn snapped_to_header(&self) -> QuantConfig {
        QuantConfig {
            q: self.q as f32 as f64,
            offset: self.offset as f32 as f64,
            omega: self.omega,
        }
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Dead-zone quantization of an already-centered latent.
pub fn dead_zone_quantize(y: f64, cfg: &QuantConfig) -> i64 {
    (sgn(y) * (y.abs() / cfg.q + cfg.offset).floor()) as i64
}

/// Reconstruction value for a symbol; the caller re-adds the channel center.
pub fn dequantize(s: i64, cfg: &QuantConfig) -> f64 {
    s as f64 * cfg.q
}

/// Half-open interval [y_lower, y_upper) of centered latents mapping to `s`.
pub fn symbol_interval(s: i64, cfg: &QuantConfig) -> (f64, f64) {
    let se = s as f64;
    let spread = 0.5 - cfg.offset;
    let upper = (se + 0.5 + sgn(se + cfg.omega) * spread) * cfg.q;
    let lower = (se - 0.5 + sgn(se - cfg.omega) * spread) * cfg.q;
    (lower, upper)
}

/// Probability mass of symbol `s` under a channel CDF evaluated on the
/// uncentered latent axis: CDF(center + y_upper) - CDF(center + y_lower).
pub fn symbol_probability<F: Fn(f64) -> f64>(
    cdf: F,
    s: i64,
    cfg: &QuantConfig,
    center: f64,
) -> f64 {
    let (lo, hi) = symbol_interval(s, cfg);
    (cdf(center + hi) - cdf(center + lo)).max(0.0)
}

/// Symbol bounds implied by the trained latent bounds of one channel.
pub fn symbol_bounds(y_min: f64, y_max: f64, center: f64, cfg: &QuantConfig) -> (i64, i64) {
    (
        dead_zone_quantize(y_min - center, cfg),
        dead_zone_quantize(y_max - center, cfg),
    )
}

/// Integer frequencies proportional to `probs`, summing to exactly 2^16 with
/// a floor of one count per symbol, apportioned by largest remainder.
///
/// Probabilities are snapped to 2^-60 resolution and the apportionment runs
/// in u128 arithmetic, so the result is identical on every platform. Ties on
/// equal remainders go to the lower symbol index.
pub fn apportion_frequencies(probs: &[f64]) -> Result<Vec<u32>> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::Config("no symbols to apportion".into()));
    }
    if n > FREQ_TOTAL as usize {
        return Err(Error::Config(format!(
            "{n} symbols exceed the frequency total {FREQ_TOTAL}"
        )));
    }
    const SCALE: f64 = (1u128 << 60) as f64;
    let weights: Vec<u128> = probs
        .iter()
        .map(|&p| {
            if p.is_finite() && p > 0.0 {
                (p.min(1.0) * SCALE).round() as u128
            } else {
                0
            }
        })
        .collect();
    let wsum: u128 = weights.iter().sum();
    let total = FREQ_TOTAL as u128;

    let mut freqs = vec![0u32; n];
    if wsum == 0 {
        // Degenerate input: fall back to the uniform distribution.
        let base = (total / n as u128) as u32;
        let extra = (total % n as u128) as usize;
        for (i, f) in freqs.iter_mut().enumerate() {
            *f = base + u32::from(i < extra);
        }
        return Ok(freqs);
    }

    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(n);
    let mut assigned: u128 = 0;
    for (i, &w) in weights.iter().enumerate() {
        let t = w * total;
        let base = t / wsum;
        freqs[i] = base as u32;
        assigned += base;
        remainders.push((t % wsum, i));
    }
    let mut left = (total - assigned) as usize;
    // Largest remainder first; lower index wins ties.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(left) {
        freqs[i] += 1;
    }
    // Enforce the floor of one count, stealing from the richest symbol.
    left = 0;
    for f in freqs.iter_mut() {
        if *f == 0 {
            *f = 1;
            left += 1;
        }
    }
    while left > 0 {
        let (ri, _) = freqs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if freqs[ri] <= 1 {
            return Err(Error::Config("cannot satisfy frequency floor".into()));
        }
        freqs[ri] -= 1;
        left -= 1;
    }
    Ok(freqs)
}

/// Frequency table for one channel over its full symbol range.
pub fn build_frequency_table<F: Fn(f64) -> f64>(
    cdf: F,
    s_min: i64,
    s_max: i64,
    cfg: &QuantConfig,
    center: f64,
) -> Result<FrequencyTable> {
    if s_max < s_min {
        return Err(Error::Config(format!(
            "symbol bounds inverted: [{s_min}, {s_max}]"
        )));
    }
    let probs: Vec<f64> = (s_min..=s_max)
        .map(|s| symbol_probability(&cdf, s, cfg, center))
        .collect();
    let freqs = apportion_frequencies(&probs)?;
    FrequencyTable::new(s_min, freqs)
}

/// Quantized symbols for a whole image: `n_units` patches times
/// `n_channels` latents, stored patch-major / channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolPlane {
    pub n_units: usize,
    pub n_channels: usize,
    pub symbols: Vec<i64>,
}

impl SymbolPlane {
    pub fn get(&self, unit: usize, channel: usize) -> i64 {
        self.symbols[unit * self.n_channels + channel]
    }
}

/// Estimated total bits of a symbol stream under per-channel probabilities.
pub fn estimated_bits<F: Fn(usize, f64) -> f64>(
    plane: &SymbolPlane,
    cdf_by_channel: F,
    cfg: &QuantConfig,
    centers: &[f64],
) -> f64 {
    let mut bits = 0.0;
    for (i, &s) in plane.symbols.iter().enumerate() {
        let ch = i % plane.n_channels;
        let p = symbol_probability(|y| cdf_by_channel(ch, y), s, cfg, centers[ch]).max(2f64.powi(-50));
        bits += -p.log2();
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cfg(q: f64, offset: f64) -> QuantConfig {
        QuantConfig::new(q, offset).unwrap()
    }

    fn logistic(y: f64) -> f64 {
        crate::graph::sigmoid(y)
    }

    #[test]
    fn quantize_direct_evaluations() {
        assert_eq!(dead_zone_quantize(1.3, &cfg(1.0, 0.45)), 1);
        assert_eq!(dead_zone_quantize(0.54, &cfg(1.0, 0.45)), 0);
        assert_eq!(dead_zone_quantize(0.6, &cfg(1.0, 0.5)), 1);
        assert_eq!(dead_zone_quantize(-0.6, &cfg(0.5, 0.45)), -1);
        assert_eq!(dead_zone_quantize(0.0, &cfg(1.0, 0.45)), 0);
    }

    #[test]
    fn offset_half_is_round_to_nearest() {
        let c = cfg(1.0, 0.5);
        let mut rng = Rng::new(4);
        for _ in 0..100_000 {
            let y = rng.uniform(-50.0, 50.0);
            assert_eq!(dead_zone_quantize(y, &c), y.round() as i64, "y={y}");
        }
        // And for a non-unit step.
        let c2 = cfg(0.75, 0.5);
        for _ in 0..10_000 {
            let y = rng.uniform(-50.0, 50.0);
            assert_eq!(dead_zone_quantize(y, &c2), (y / 0.75).round() as i64);
        }
    }

    #[test]
    fn dequantize_values() {
        assert_eq!(dequantize(0, &cfg(1.0, 0.45)), 0.0);
        assert_eq!(dequantize(3, &cfg(0.75, 0.45)), 2.25);
    }

    #[test]
    fn quantize_dequantize_idempotent() {
        for &q in &[0.25, 0.5, 1.0, 1.75, 3.5] {
            for &offset in &OFFSET_SWEEP {
                let c = cfg(q, offset);
                for s in -100..=100i64 {
                    let y = dequantize(s, &c);
                    assert_eq!(dead_zone_quantize(y, &c), s, "s={s} q={q} offset={offset}");
                }
            }
        }
    }

    #[test]
    fn interval_direct_evaluations() {
        let (lo, hi) = symbol_interval(0, &cfg(1.0, 0.45));
        assert!((lo - -0.55).abs() < 1e-12 && (hi - 0.55).abs() < 1e-12);
        let (lo, hi) = symbol_interval(1, &cfg(1.0, 0.45));
        assert!((lo - 0.55).abs() < 1e-12 && (hi - 1.55).abs() < 1e-12);
        let (lo, hi) = symbol_interval(-2, &cfg(2.0, 0.4));
        assert!((lo - -5.2).abs() < 1e-12 && (hi - -3.2).abs() < 1e-12);
        assert_eq!(dead_zone_quantize(-4.0, &cfg(2.0, 0.4)), -2);
        assert!(-4.0 >= lo && -4.0 < hi);
    }

    #[test]
    fn intervals_partition_the_line() {
        let mut rng = Rng::new(2024);
        for &q in &[0.25, 0.5, 1.0, 2.0, 4.0] {
            for &offset in &OFFSET_SWEEP {
                let c = cfg(q, offset);
                // Tiling: upper(s) == lower(s+1) exactly.
                for s in -200..200i64 {
                    let (_, hi) = symbol_interval(s, &c);
                    let (lo_next, _) = symbol_interval(s + 1, &c);
                    assert!(
                        (hi - lo_next).abs() < 1e-12,
                        "gap at s={s} q={q} offset={offset}"
                    );
                }
                // Membership at random points.
                for _ in 0..20_000 {
                    let y = rng.uniform(-30.0, 30.0);
                    let s = dead_zone_quantize(y, &c);
                    let (lo, hi) = symbol_interval(s, &c);
                    assert!(y >= lo && y < hi, "y={y} s={s} [{lo},{hi})");
                }
            }
        }
    }

    #[test]
    fn interval_widths() {
        for &q in &[0.25, 0.5, 1.0, 2.5, 4.0] {
            for &offset in &OFFSET_SWEEP {
                let c = cfg(q, offset);
                let (lo0, hi0) = symbol_interval(0, &c);
                assert!(
                    ((hi0 - lo0) - 2.0 * (1.0 - offset) * q).abs() < 1e-12,
                    "dead zone width q={q} offset={offset}"
                );
                for s in [-50, -3, -1, 1, 3, 50] {
                    let (lo, hi) = symbol_interval(s, &c);
                    assert!(((hi - lo) - q).abs() < 1e-12, "width at s={s}");
                }
            }
        }
    }

    #[test]
    fn symbol_probability_logistic_oracle() {
        // Oracle: closed-form logistic CDF, computed first and frozen here.
        let c = cfg(1.0, 0.45);
        let p = symbol_probability(logistic, 0, &c, 0.0);
        let oracle = logistic(0.55) - logistic(-0.55);
        assert!((p - oracle).abs() < 1e-15);
        assert!((oracle - 0.268_271_2).abs() < 1e-6, "oracle {oracle}");
    }

    #[test]
    fn symbol_probabilities_telescope() {
        let c = cfg(1.0, 0.45);
        let total: f64 = (-8..=8).map(|s| symbol_probability(logistic, s, &c, 0.0)).sum();
        let (lo, _) = symbol_interval(-8, &c);
        let (_, hi) = symbol_interval(8, &c);
        assert!((total - (logistic(hi) - logistic(lo))).abs() < 1e-12);
    }

    #[test]
    fn offset_half_matches_uniform_interval_form() {
        // With offset = 0.5 the interval of s is ((s-0.5)Q, (s+0.5)Q].
        let c = cfg(0.8, 0.5);
        for s in -5..=5i64 {
            let (lo, hi) = symbol_interval(s, &c);
            assert!((lo - (s as f64 - 0.5) * 0.8).abs() < 1e-12);
            assert!((hi - (s as f64 + 0.5) * 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn apportion_exact_split() {
        let f = apportion_frequencies(&[0.75, 0.25]).unwrap();
        assert_eq!(f, vec![49152, 16384]);
    }

    #[test]
    fn apportion_uniform_seven() {
        let f = apportion_frequencies(&[1.0 / 7.0; 7]).unwrap();
        assert_eq!(f.iter().map(|&x| x as u64).sum::<u64>(), 65536);
        let (mn, mx) = (f.iter().min().unwrap(), f.iter().max().unwrap());
        assert!(mx - mn <= 1);
    }

    #[test]
    fn apportion_floor_of_one() {
        let f = apportion_frequencies(&[1.0, 1e-30, 0.0]).unwrap();
        assert_eq!(f.iter().map(|&x| x as u64).sum::<u64>(), 65536);
        assert!(f.iter().all(|&x| x >= 1));
    }

    /// Independent largest-remainder oracle in exact integer arithmetic,
    /// built from the f64 bit patterns (mantissa * 2^exp) directly.
    fn oracle_apportion(probs: &[f64]) -> Vec<u32> {
        fn decompose(v: f64) -> (u64, i32) {
            assert!(v > 0.0 && v.is_finite());
            let bits = v.to_bits();
            let exp = ((bits >> 52) & 0x7FF) as i32;
            let frac = bits & ((1u64 << 52) - 1);
            if exp == 0 {
                (frac, -1074)
            } else {
                (frac | (1u64 << 52), exp - 1075)
            }
        }
        let parts: Vec<(u64, i32)> = probs.iter().map(|&p| decompose(p)).collect();
        let e_min = parts.iter().map(|&(_, e)| e).min().unwrap();
        let w: Vec<u128> = parts
            .iter()
            .map(|&(m, e)| {
                let shift = (e - e_min) as u32;
                assert!(shift < 60, "oracle range too wide");
                (m as u128) << shift
            })
            .collect();
        let wsum: u128 = w.iter().sum();
        let total = 65536u128;
        let mut freqs = vec![0u32; probs.len()];
        let mut rems: Vec<(u128, usize)> = Vec::new();
        let mut assigned = 0u128;
        for (i, &wi) in w.iter().enumerate() {
            let t = wi * total;
            freqs[i] = (t / wsum) as u32;
            assigned += t / wsum;
            rems.push((t % wsum, i));
        }
        rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in rems.iter().take((total - assigned) as usize) {
            freqs[i] += 1;
        }
        let mut owed = 0;
        for f in freqs.iter_mut() {
            if *f == 0 {
                *f = 1;
                owed += 1;
            }
        }
        while owed > 0 {
            let (ri, _) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            freqs[ri] -= 1;
            owed -= 1;
        }
        freqs
    }

    #[test]
    fn frequency_table_matches_bigint_oracle() {
        let c = cfg(1.0, 0.45);
        let probs: Vec<f64> = (-8..=8)
            .map(|s| symbol_probability(logistic, s, &c, 0.0))
            .collect();
        let expected = oracle_apportion(&probs);
        let table = build_frequency_table(logistic, -8, 8, &c, 0.0).unwrap();
        assert_eq!(table.freqs(), expected.as_slice());
        assert_eq!(
            table.freqs().iter().map(|&f| f as u64).sum::<u64>(),
            65536
        );
    }

    #[test]
    fn frequency_table_deterministic() {
        let c = cfg(0.75, 0.4);
        let t1 = build_frequency_table(logistic, -10, 12, &c, 0.3).unwrap();
        let t2 = build_frequency_table(logistic, -10, 12, &c, 0.3).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn inverted_bounds_rejected() {
        let c = cfg(1.0, 0.45);
        assert!(build_frequency_table(logistic, 3, 2, &c, 0.0).is_err());
    }

    #[test]
    fn estimated_bits_non_increasing_in_q() {
        // A fixed latent corpus costs fewer estimated bits as Q grows.
        let mut rng = Rng::new(31);
        let latents: Vec<f64> = (0..1000).map(|_| {
            // heavier-tailed mix so several symbols are exercised
            let u = rng.uniform(-1.0, 1.0);
            4.0 * u * u * u
        }).collect();
        let mut prev = f64::INFINITY;
        for &q in &Q_SWEEP {
            let c = cfg(q, 0.45);
            let plane = SymbolPlane {
                n_units: latents.len(),
                n_channels: 1,
                symbols: latents.iter().map(|&y| dead_zone_quantize(y, &c)).collect(),
            };
            let bits = estimated_bits(&plane, |_, y| logistic(y), &c, &[0.0]);
            assert!(bits <= prev + 1e-9, "bits {bits} > prev {prev} at q={q}");
            prev = bits;
        }
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(0.0, 0.45).is_err());
        assert!(QuantConfig::new(-1.0, 0.45).is_err());
        assert!(QuantConfig::new(1.0, 0.0).is_err());
        assert!(QuantConfig::new(1.0, 0.6).is_err());
        assert!(QuantConfig::new(1.0, 0.5).is_ok());
    }

    #[test]
    fn header_snapping_is_stable() {
        let c = cfg(1.0 / 3.0, 0.45).snapped_to_header();
        let again = c.snapped_to_header();
        assert_eq!(c, again);
    }
}
