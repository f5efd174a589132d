//! Lossless range coding over quantized symbols, and the bit-exact
//! bitstream container.
//!
//! The coder is a carry-less 32-bit range coder with 8-bit renormalization
//! (Subbotin style). All arithmetic is integer, so identical inputs produce
//! identical payload bytes on every platform. Frequencies are 16-bit
//! fixed-point: every table sums to exactly 2^16 with a per-symbol floor of
//! one count, which keeps any in-range symbol decodable.
//!
//! Probability tables are *not* serialized; encoder and decoder both rebuild
//! them deterministically from the model, the quantization step and the
//! trained latent bounds carried in the header. Model identity is enforced
//! with the 64-bit model hash.

use crate::error::{Error, Result};
use crate::quant::SymbolPlane;

/// Frequencies are scaled so each table totals 2^16.
pub const FREQ_TOTAL_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_TOTAL_BITS;

const TOP: u32 = 1 << 24;
const BOTTOM: u32 = 1 << 16;

/// Integer probability table over the contiguous symbol range
/// `[s_min, s_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    s_min: i64,
    s_max: i64,
    freqs: Vec<u32>,
    /// Prefix sums; `cum[i+1] - cum[i] == freqs[i]`, `cum[last] == 2^16`.
    cum: Vec<u32>,
}

impl FrequencyTable {
    pub fn new(s_min: i64, freqs: Vec<u32>) -> Result<FrequencyTable> {
        if freqs.is_empty() {
            return Err(Error::Config("frequency table with no symbols".into()));
        }
        let sum: u64 = freqs.iter().map(|&f| f as u64).sum();
        if sum != FREQ_TOTAL as u64 {
            return Err(Error::Config(format!(
                "frequency table sums to {sum}, expected {FREQ_TOTAL}"
            )));
        }
        if freqs.contains(&0) {
            return Err(Error::Config("frequency table contains a zero count".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        let s_max = s_min + freqs.len() as i64 - 1;
        Ok(FrequencyTable {
            s_min,
            s_max,
            freqs,
            cum,
        })
    }

    pub fn s_min(&self) -> i64 {
        self.s_min
    }

    pub fn s_max(&self) -> i64 {
        self.s_max
    }

    pub fn num_symbols(&self) -> usize {
        self.freqs.len()
    }

    pub fn contains(&self, s: i64) -> bool {
        s >= self.s_min && s <= self.s_max
    }

    pub fn freq(&self, s: i64) -> u32 {
        self.freqs[(s - self.s_min) as usize]
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    fn cum_freq(&self, s: i64) -> (u32, u32) {
        let i = (s - self.s_min) as usize;
        (self.cum[i], self.freqs[i])
    }

    /// Symbol whose cumulative interval contains `target`.
    fn lookup(&self, target: u32) -> i64 {
        // cum is strictly increasing; binary search for the last entry <= target.
        let mut lo = 0usize;
        let mut hi = self.freqs.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.s_min + lo as i64
    }

    /// Ideal code length of `s` in bits under this table.
    pub fn bits_of(&self, s: i64) -> f64 {
        -((self.freq(s) as f64) / FREQ_TOTAL as f64).log2()
    }
}

/// Carry-less range encoder.
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FrequencyTable, s: i64) -> Result<()> {
        if !table.contains(s) {
            return Err(Error::Encode(format!(
                "symbol {s} outside table range [{}, {}]",
                table.s_min, table.s_max
            )));
        }
        let (cum, freq) = table.cum_freq(s);
        let r = self.range >> FREQ_TOTAL_BITS;
        self.low = self.low.wrapping_add(r.wrapping_mul(cum));
        self.range = r * freq;
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                // Top bytes disagree but the range is tiny: pin the range to
                // the current 2^16 boundary so no carry can propagate.
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flush the final state; returns the payload bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

/// Mirror-image decoder; consumes exactly the bytes the encoder produced.
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.buf.len() {
            return Err(Error::Decode("payload exhausted".into()));
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<i64> {
        let r = self.range >> FREQ_TOTAL_BITS;
        let target = (self.code.wrapping_sub(self.low) / r).min(FREQ_TOTAL - 1);
        let s = table.lookup(target);
        let (cum, freq) = table.cum_freq(s);
        self.low = self.low.wrapping_add(r.wrapping_mul(cum));
        self.range = r * freq;
        self.normalize()?;
        Ok(s)
    }

    fn normalize(&mut self) -> Result<()> {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// Encode a symbol plane in its pinned order (patch-major, channel-minor)
/// with one frequency table per latent channel.
pub fn range_encode(plane: &SymbolPlane, tables: &[FrequencyTable]) -> Result<Vec<u8>> {
    if tables.len() != plane.n_channels {
        return Err(Error::Config(format!(
            "{} tables for {} channels",
            tables.len(),
            plane.n_channels
        )));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in plane.symbols.iter().enumerate() {
        let ch = i % plane.n_channels;
        enc.encode(&tables[ch], s).map_err(|e| {
            Error::Encode(format!("channel {ch}, symbol index {i}: {e}"))
        })?;
    }
    Ok(enc.finish())
}

/// Decode `count` symbols produced by [`range_encode`] with identical tables.
pub fn range_decode(payload: &[u8], tables: &[FrequencyTable], count: usize) -> Result<Vec<i64>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if tables.is_empty() {
        return Err(Error::Config("no frequency tables".into()));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ch = i % tables.len();
        out.push(dec.decode(&tables[ch])?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bitstream container
// ---------------------------------------------------------------------------

pub const BITSTREAM_MAGIC: [u8; 4] = *b"IQDZ";
pub const BITSTREAM_VERSION: u8 = 1;

/// Flag bit: latents were centered on zero instead of the trained medians.
pub const FLAG_ZERO_CENTERED: u8 = 0x01;

/// Everything the decoder needs to rebuild the frequency tables and undo the
/// patch grid, besides the model file itself.
#[derive(Clone, Debug, PartialEq)]
pub struct BitstreamHeader {
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub patch_size: u8,
    pub latent_dim: u16,
    pub q: f32,
    pub offset: f32,
    pub model_hash: u64,
    /// Per-latent-channel symbol bounds, `latent_dim` entries.
    pub symbol_bounds: Vec<(i16, i16)>,
}

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Serialize header + payload. Layout (little-endian):
/// magic "IQDZ" | version u8 | flags u8 | width u16 | height u16 |
/// channels u8 | patch_size u8 | latent_dim u16 | Q f32 | offset f32 |
/// model_hash u64 | (s_min i16, s_max i16) x latent_dim | payload_len u32 |
/// header_crc32 u32 | payload. The CRC covers every byte before it.
pub fn write_bitstream(header: &BitstreamHeader, payload: &[u8]) -> Result<Vec<u8>> {
    if header.symbol_bounds.len() != header.latent_dim as usize {
        return Err(Error::Config(format!(
            "{} symbol bounds for latent_dim {}",
            header.symbol_bounds.len(),
            header.latent_dim
        )));
    }
    if payload.len() > u32::MAX as usize {
        return Err(Error::Config("payload too large for u32 length".into()));
    }
    let mut buf = Vec::with_capacity(32 + 4 * header.symbol_bounds.len() + payload.len());
    buf.extend_from_slice(&BITSTREAM_MAGIC);
    buf.push(BITSTREAM_VERSION);
    buf.push(header.flags);
    buf.extend_from_slice(&header.width.to_le_bytes());
    buf.extend_from_slice(&header.height.to_le_bytes());
    buf.push(header.channels);
    buf.push(header.patch_size);
    buf.extend_from_slice(&header.latent_dim.to_le_bytes());
    buf.extend_from_slice(&header.q.to_le_bytes());
    buf.extend_from_slice(&header.offset.to_le_bytes());
    buf.extend_from_slice(&header.model_hash.to_le_bytes());
    for &(lo, hi) in &header.symbol_bounds {
        buf.extend_from_slice(&lo.to_le_bytes());
        buf.extend_from_slice(&hi.to_le_bytes());
    }
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf.extend_from_slice(payload);
    Ok(buf)
}

/// Parse and validate a bitstream; returns the header and payload bytes.
pub fn read_bitstream(bytes: &[u8]) -> Result<(BitstreamHeader, Vec<u8>)> {
    const FIXED: usize = 4 + 1 + 1 + 2 + 2 + 1 + 1 + 2 + 4 + 4 + 8;
    if bytes.len() < FIXED {
        return Err(Error::Format("bitstream shorter than fixed header".into()));
    }
    if bytes[0..4] != BITSTREAM_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != BITSTREAM_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let flags = bytes[5];
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let height = u16::from_le_bytes([bytes[8], bytes[9]]);
    let channels = bytes[10];
    let patch_size = bytes[11];
    let latent_dim = u16::from_le_bytes([bytes[12], bytes[13]]);
    let q = f32::from_le_bytes([bytes[14], bytes[15], bytes[16], bytes[17]]);
    let offset = f32::from_le_bytes([bytes[18], bytes[19], bytes[20], bytes[21]]);
    let model_hash = u64::from_le_bytes(bytes[22..30].try_into().unwrap());
    let bounds_len = 4 * latent_dim as usize;
    let header_len = FIXED + bounds_len;
    if bytes.len() < header_len + 4 {
        return Err(Error::Format("bitstream truncated inside header".into()));
    }
    let mut symbol_bounds = Vec::with_capacity(latent_dim as usize);
    let mut at = 30;
    for _ in 0..latent_dim {
        let lo = i16::from_le_bytes([bytes[at], bytes[at + 1]]);
        let hi = i16::from_le_bytes([bytes[at + 2], bytes[at + 3]]);
        symbol_bounds.push((lo, hi));
        at += 4;
    }
    let payload_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    at += 4;
    let crc_stored = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let crc_actual = crc32(&bytes[..at]);
    if crc_stored != crc_actual {
        return Err(Error::Format(format!(
            "header CRC mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}"
        )));
    }
    at += 4;
    if bytes.len() - at != payload_len {
        return Err(Error::Format(format!(
            "payload length {} does not match header field {payload_len}",
            bytes.len() - at
        )));
    }
    let header = BitstreamHeader {
        flags,
        width,
        height,
        channels,
        patch_size,
        latent_dim,
        q,
        offset,
        model_hash,
        symbol_bounds,
    };
    Ok((header, bytes[at..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn plane(symbols: Vec<i64>, n_channels: usize) -> SymbolPlane {
        let n_units = if n_channels == 0 { 0 } else { symbols.len() / n_channels };
        SymbolPlane {
            n_units,
            n_channels,
            symbols,
        }
    }

    /// Random valid table: positive freqs summing to 2^16.
    fn random_table(rng: &mut Rng, n_symbols: usize, s_min: i64) -> FrequencyTable {
        let mut freqs: Vec<u32> = (0..n_symbols).map(|_| 1u32).collect();
        let mut left = FREQ_TOTAL - n_symbols as u32;
        // Dirichlet-ish: spread the remaining mass with random weights.
        let weights: Vec<f64> = (0..n_symbols).map(|_| rng.next_f64().powi(2) + 1e-9).collect();
        let wsum: f64 = weights.iter().sum();
        for i in 0..n_symbols {
            let take = ((weights[i] / wsum) * left as f64) as u32;
            freqs[i] += take.min(left);
        }
        let used: u32 = freqs.iter().sum();
        left = FREQ_TOTAL - used;
        freqs[0] += left;
        FrequencyTable::new(s_min, freqs).unwrap()
    }

    fn draw_from(table: &FrequencyTable, rng: &mut Rng) -> i64 {
        let t = (rng.next_u64() & 0xFFFF) as u32;
        table.lookup(t)
    }

    #[test]
    fn table_validation() {
        assert!(FrequencyTable::new(0, vec![FREQ_TOTAL]).is_ok());
        assert!(FrequencyTable::new(0, vec![FREQ_TOTAL - 1]).is_err());
        assert!(FrequencyTable::new(0, vec![FREQ_TOTAL, 0]).is_err());
        assert!(FrequencyTable::new(0, vec![]).is_err());
    }

    #[test]
    fn empty_stream_payload_is_flush_only() {
        let p = plane(vec![], 1);
        let t = FrequencyTable::new(0, vec![FREQ_TOTAL]).unwrap();
        let bytes = range_encode(&p, &[t.clone()]).unwrap();
        assert!(bytes.len() <= 8, "payload {} bytes", bytes.len());
        let back = range_decode(&bytes, &[t], 0).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_symbol_alphabet_stays_tiny() {
        let t = FrequencyTable::new(5, vec![FREQ_TOTAL]).unwrap();
        let p = plane(vec![5; 10_000], 1);
        let bytes = range_encode(&p, &[t.clone()]).unwrap();
        assert!(bytes.len() <= 8, "payload {} bytes", bytes.len());
        let back = range_decode(&bytes, &[t], 10_000).unwrap();
        assert!(back.iter().all(|&s| s == 5));
    }

    #[test]
    fn round_trip_random_tables_and_streams() {
        let mut rng = Rng::new(0xC0DE);
        for case in 0..40 {
            let n_symbols = 2 + rng.below(60);
            let s_min = -(rng.below(30) as i64);
            let table = random_table(&mut rng, n_symbols, s_min);
            let count = 1 + rng.below(3000);
            let symbols: Vec<i64> = (0..count).map(|_| draw_from(&table, &mut rng)).collect();
            let p = plane(symbols.clone(), 1);
            let bytes = range_encode(&p, &[table.clone()]).unwrap();
            let back = range_decode(&bytes, &[table], count).unwrap();
            assert_eq!(back, symbols, "case {case}");
        }
    }

    #[test]
    fn round_trip_multichannel() {
        let mut rng = Rng::new(77);
        let tables: Vec<FrequencyTable> = (0..4)
            .map(|c| random_table(&mut rng, 5 + c * 3, -(c as i64)))
            .collect();
        let count = 4 * 500;
        let symbols: Vec<i64> = (0..count)
            .map(|i| draw_from(&tables[i % 4], &mut rng))
            .collect();
        let p = plane(symbols.clone(), 4);
        let bytes = range_encode(&p, &tables).unwrap();
        let back = range_decode(&bytes, &tables, count).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn out_of_range_symbol_names_channel_and_index() {
        let t = FrequencyTable::new(0, vec![FREQ_TOTAL / 2, FREQ_TOTAL / 2]).unwrap();
        let p = plane(vec![0, 1, 7], 1);
        let err = range_encode(&p, &[t]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("index 2"), "{msg}");
    }

    #[test]
    fn compressed_length_close_to_entropy() {
        let mut rng = Rng::new(42);
        for _ in 0..10 {
            let table = random_table(&mut rng, 20, -10);
            let count = 20_000;
            let symbols: Vec<i64> = (0..count).map(|_| draw_from(&table, &mut rng)).collect();
            let ideal_bits: f64 = symbols.iter().map(|&s| table.bits_of(s)).sum();
            let p = plane(symbols, 1);
            let bytes = range_encode(&p, &[table]).unwrap();
            let actual_bits = 8.0 * bytes.len() as f64;
            assert!(
                actual_bits <= 1.01 * ideal_bits + 128.0,
                "actual {actual_bits} ideal {ideal_bits}"
            );
        }
    }

    #[test]
    fn truncated_payload_errors() {
        let mut rng = Rng::new(9);
        let table = random_table(&mut rng, 16, 0);
        let symbols: Vec<i64> = (0..500).map(|_| draw_from(&table, &mut rng)).collect();
        let p = plane(symbols, 1);
        let bytes = range_encode(&p, &[table.clone()]).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        let res = range_decode(cut, &[table], 500);
        assert!(res.is_err());
    }

    #[test]
    fn bit_flip_detected_or_differs() {
        let mut rng = Rng::new(13);
        let table = random_table(&mut rng, 12, -6);
        let symbols: Vec<i64> = (0..2000).map(|_| draw_from(&table, &mut rng)).collect();
        let p = plane(symbols.clone(), 1);
        let bytes = range_encode(&p, &[table.clone()]).unwrap();
        for flip in [0usize, bytes.len() / 3, bytes.len() - 1] {
            let mut corrupted = bytes.clone();
            corrupted[flip] ^= 0x10;
            match range_decode(&corrupted, &[table.clone()], 2000) {
                Err(_) => {}
                Ok(back) => assert_ne!(back, symbols, "flip at {flip} went unnoticed"),
            }
        }
    }

    #[test]
    fn crc32_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn bitstream_round_trip_randomized() {
        let mut rng = Rng::new(555);
        for _ in 0..50 {
            let latent_dim = 1 + rng.below(40) as u16;
            let header = BitstreamHeader {
                flags: (rng.next_u64() & 1) as u8,
                width: 1 + (rng.next_u64() % 4000) as u16,
                height: 1 + (rng.next_u64() % 4000) as u16,
                channels: if rng.below(2) == 0 { 1 } else { 3 },
                patch_size: 8 << rng.below(2),
                latent_dim,
                q: rng.uniform(0.01, 8.0) as f32,
                offset: rng.uniform(0.05, 0.5) as f32,
                model_hash: rng.next_u64(),
                symbol_bounds: (0..latent_dim)
                    .map(|_| {
                        let lo = -(rng.below(100) as i16);
                        let hi = rng.below(100) as i16;
                        (lo, hi)
                    })
                    .collect(),
            };
            let payload: Vec<u8> = (0..rng.below(300)).map(|_| rng.next_u64() as u8).collect();
            let bytes = write_bitstream(&header, &payload).unwrap();
            let (h2, p2) = read_bitstream(&bytes).unwrap();
            assert_eq!(h2, header);
            assert_eq!(p2, payload);
        }
    }

    #[test]
    fn bitstream_rejects_bad_magic() {
        let header = BitstreamHeader {
            flags: 0,
            width: 4,
            height: 4,
            channels: 1,
            patch_size: 8,
            latent_dim: 1,
            q: 1.0,
            offset: 0.45,
            model_hash: 1,
            symbol_bounds: vec![(-1, 1)],
        };
        let mut bytes = write_bitstream(&header, b"xy").unwrap();
        bytes[0] = b'J';
        assert!(matches!(
            read_bitstream(&bytes),
            Err(crate::error::Error::Format(_))
        ));
    }

    #[test]
    fn bitstream_rejects_crc_flip() {
        let header = BitstreamHeader {
            flags: 0,
            width: 4,
            height: 4,
            channels: 1,
            patch_size: 8,
            latent_dim: 1,
            q: 1.0,
            offset: 0.45,
            model_hash: 1,
            symbol_bounds: vec![(-1, 1)],
        };
        let mut bytes = write_bitstream(&header, b"xy").unwrap();
        // Flip a bit inside the covered region (width field).
        bytes[6] ^= 0x01;
        match read_bitstream(&bytes) {
            Err(crate::error::Error::Format(m)) => assert!(m.contains("CRC"), "{m}"),
            other => panic!("expected CRC failure, got {other:?}"),
        }
    }

    #[test]
    fn bitstream_rejects_bad_version() {
        let header = BitstreamHeader {
            flags: 0,
            width: 4,
            height: 4,
            channels: 1,
            patch_size: 8,
            latent_dim: 1,
            q: 1.0,
            offset: 0.45,
            model_hash: 1,
            symbol_bounds: vec![(-1, 1)],
        };
        let mut bytes = write_bitstream(&header, b"").unwrap();
        bytes[4] = 9;
        assert!(read_bitstream(&bytes).is_err());
    }
}
