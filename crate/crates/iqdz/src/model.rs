//! The dense patch autoencoder, the factorized entropy model with trained
//! per-channel bounds, and the model file format.
//!
//! The encoder maps a channel-planar `P*P*C` patch vector to `N` latents;
//! the decoder maps latents back through a final sigmoid so reconstructions
//! stay in [0,1]. The entropy model is one monotone scalar network per
//! latent channel: `K` affine stages with softplus-positive weights, the
//! inner stages followed by `x + tanh(a)*tanh(x)`, and a final sigmoid.
//! Positivity of the weights and `|tanh(a)| < 1` make every stage strictly
//! increasing, so the composition is a valid CDF with limits 0 and 1.
//!
//! With the symmetric initialization (unit effective weights, zero biases)
//! the CDF starts as the standard logistic `sigmoid(y)`, which several
//! closed-form tests rely on.

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus};
use crate::rng::Rng;

pub const MODEL_MAGIC: &[u8; 6] = b"IQDZM1";

/// Probability floor for rate computation, 2^-50.
pub const PROB_FLOOR: f64 = 1.0 / (1u64 << 50) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Activation> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// One fully-connected layer; weights are `[in, out]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, act: Activation) -> DenseLayer {
        DenseLayer {
            in_dim,
            out_dim,
            act,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, act: Activation, rng: &mut Rng) -> DenseLayer {
        // Xavier-uniform fan-in/fan-out scaling.
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        DenseLayer {
            in_dim,
            out_dim,
            act,
            w: (0..in_dim * out_dim).map(|_| rng.uniform(-s, s)).collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (k, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                let row = &self.w[k * self.out_dim..(k + 1) * self.out_dim];
                for (o, wv) in row.iter().enumerate() {
                    y[o] += xv * wv;
                }
            }
        }
        for v in &mut y {
            *v = self.act.apply(*v);
        }
        y
    }
}

/// Encoder/decoder pair over flat channel-planar patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    pub patch_size: usize,
    pub channels_in: usize,
    pub latent_dim: usize,
    pub encoder: Vec<DenseLayer>,
    pub decoder: Vec<DenseLayer>,
}

impl AutoencoderModel {
    /// Patch vector length `P*P*C`.
    pub fn input_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }

    /// Fresh model: `hidden` tanh layers of width `4*P*P` on each side,
    /// linear latent head, sigmoid pixel head.
    pub fn init(
        patch_size: usize,
        channels_in: usize,
        latent_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> AutoencoderModel {
        let d = patch_size * patch_size * channels_in;
        let h = 4 * patch_size * patch_size;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut cur = d;
        for _ in 0..hidden {
            encoder.push(DenseLayer::init(cur, h, Activation::Tanh, rng));
            cur = h;
        }
        encoder.push(DenseLayer::init(cur, latent_dim, Activation::Linear, rng));
        cur = latent_dim;
        for _ in 0..hidden {
            decoder.push(DenseLayer::init(cur, h, Activation::Tanh, rng));
            cur = h;
        }
        decoder.push(DenseLayer::init(cur, d, Activation::Sigmoid, rng));
        AutoencoderModel {
            patch_size,
            channels_in,
            latent_dim,
            encoder,
            decoder,
        }
    }

    /// y = f_theta(patch); deterministic.
    pub fn encode_latent(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "patch has {} values, model wants {}",
                patch.len(),
                self.input_dim()
            )));
        }
        let mut x = patch.to_vec();
        for layer in &self.encoder {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    /// x_hat = g_phi(y) in [0,1]^(P*P*C).
    pub fn decode_latent(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "latent has {} values, model wants {}",
                y.len(),
                self.latent_dim
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent in decode_latent".into()));
        }
        let mut x = y.to_vec();
        for layer in &self.decoder {
            x = layer.forward(&x);
        }
        Ok(x)
    }
}

/// Trained quantile bounds of one latent channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelBounds {
    pub y_min: f64,
    pub y_max: f64,
    pub median: f64,
}

/// One stage of the per-channel CDF chain. Arrays hold one scalar per
/// latent channel; `a_raw` is absent on the final stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfLayer {
    pub w_raw: Vec<f64>,
    pub b: Vec<f64>,
    pub a_raw: Option<Vec<f64>>,
}

/// Factorized entropy model: independent monotone CDF per latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    pub latent_dim: usize,
    pub layers: Vec<CdfLayer>,
    pub bounds: Vec<ChannelBounds>,
}

impl EntropyModel {
    /// Symmetric initialization: every channel starts as the logistic CDF
    /// `sigmoid(y)`, so `cdf(0) = 0.5` exactly.
    pub fn init(latent_dim: usize, k_layers: usize) -> EntropyModel {
        // softplus(w_raw) == 1
        let w_unit = (std::f64::consts::E - 1.0).ln();
        let layers = (0..k_layers)
            .map(|k| CdfLayer {
                w_raw: vec![w_unit; latent_dim],
                b: vec![0.0; latent_dim],
                a_raw: if k + 1 < k_layers {
                    Some(vec![0.0; latent_dim])
                } else {
                    None
                },
            })
            .collect();
        // Logistic quantiles; retrained bounds replace these after training.
        let q = |p: f64| (p / (1.0 - p)).ln();
        let bounds = vec![
            ChannelBounds {
                y_min: q(0.0005),
                y_max: q(0.9995),
                median: 0.0,
            };
            latent_dim
        ];
        EntropyModel {
            latent_dim,
            layers,
            bounds,
        }
    }

    /// CDF of channel `ch` at `y`; strictly increasing, in (0,1).
    pub fn cdf(&self, ch: usize, y: f64) -> f64 {
        debug_assert!(ch < self.latent_dim);
        let mut x = y;
        for layer in &self.layers {
            x = softplus(layer.w_raw[ch]) * x + layer.b[ch];
            if let Some(a_raw) = &layer.a_raw {
                x += a_raw[ch].tanh() * x.tanh();
            }
        }
        sigmoid(x)
    }

    /// Interval probability of Eq-style width `alpha` around `y`.
    pub fn interval_probability(&self, ch: usize, y: f64, alpha: f64) -> f64 {
        self.cdf(ch, y + alpha / 2.0) - self.cdf(ch, y - alpha / 2.0)
    }

    /// Total rate of a latent vector in bits:
    /// sum_i -log2(max(CDF_i(y_i + a/2) - CDF_i(y_i - a/2), 2^-50)).
    pub fn rate_bits(&self, y: &[f64], alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if y.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "latent has {} values, entropy model wants {}",
                y.len(),
                self.latent_dim
            )));
        }
        let mut bits = 0.0;
        for (ch, &v) in y.iter().enumerate() {
            let p = self.interval_probability(ch, v, alpha).max(PROB_FLOOR);
            bits += -p.log2();
        }
        Ok(bits)
    }

    /// Bisection bracket (lo, hi) with `cdf(lo) <= q <= cdf(hi)` and
    /// `hi - lo` below 1e-12 (absolute, or relative for large magnitudes).
    fn quantile_bracket(&self, ch: usize, q: f64) -> (f64, f64) {
        debug_assert!(q > 0.0 && q < 1.0);
        let mut lo = -1.0;
        let mut hi = 1.0;
        while self.cdf(ch, lo) > q && lo > -1e12 {
            lo *= 2.0;
        }
        while self.cdf(ch, hi) < q && hi < 1e12 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(ch, mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        (lo, hi)
    }

    /// Inverse CDF by bracketed bisection.
    pub fn quantile(&self, ch: usize, q: f64) -> f64 {
        let (lo, hi) = self.quantile_bracket(ch, q);
        0.5 * (lo + hi)
    }

    /// Freeze bounds as the (0.0005, 0.9995, 0.5) quantiles of the CDF.
    /// The outer quantiles round outward, so the captured mass
    /// `cdf(y_max) - cdf(y_min)` is at least 0.999 exactly.
    pub fn freeze_bounds(&mut self) {
        self.bounds = (0..self.latent_dim)
            .map(|ch| ChannelBounds {
                y_min: self.quantile_bracket(ch, 0.0005).0,
                y_max: self.quantile_bracket(ch, 0.9995).1,
                median: self.quantile(ch, 0.5),
            })
            .collect();
    }
}

/// Whether latents are centered on the trained medians or on zero before
/// quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    Median,
    Zero,
}

impl CenterMode {
    pub fn code(self) -> u8 {
        match self {
            CenterMode::Median => 0,
            CenterMode::Zero => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<CenterMode> {
        match c {
            0 => Ok(CenterMode::Median),
            1 => Ok(CenterMode::Zero),
            _ => Err(Error::Format(format!("unknown center mode {c}"))),
        }
    }
}

/// The deployable unit: autoencoder + entropy model + centering convention.
/// Encoder and decoder sides must hold bit-identical copies; the model hash
/// in every bitstream enforces that.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub autoencoder: AutoencoderModel,
    pub entropy: EntropyModel,
    pub center_mode: CenterMode,
}

impl CodecModel {
    pub fn init(
        patch_size: usize,
        channels_in: usize,
        latent_dim: usize,
        hidden: usize,
        cdf_layers: usize,
        seed: u64,
    ) -> CodecModel {
        let mut rng = Rng::new(seed);
        CodecModel {
            autoencoder: AutoencoderModel::init(
                patch_size,
                channels_in,
                latent_dim,
                hidden,
                &mut rng,
            ),
            entropy: EntropyModel::init(latent_dim, cdf_layers),
            center_mode: CenterMode::Median,
        }
    }

    /// Quantization center for one channel under the current mode.
    pub fn center(&self, ch: usize) -> f64 {
        match self.center_mode {
            CenterMode::Median => self.entropy.bounds[ch].median,
            CenterMode::Zero => 0.0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ae = &self.autoencoder;
        let em = &self.entropy;
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.push(ae.patch_size as u8);
        buf.push(ae.channels_in as u8);
        buf.extend_from_slice(&(ae.latent_dim as u16).to_le_bytes());
        // Layer spec table.
        buf.push(ae.encoder.len() as u8);
        buf.push(ae.decoder.len() as u8);
        buf.push(em.layers.len() as u8);
        buf.push(self.center_mode.code());
        for layer in ae.encoder.iter().chain(ae.decoder.iter()) {
            buf.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
            buf.push(layer.act.code());
        }
        // Flat parameter vector (theta, phi, psi in declaration order).
        let params = self.flat_params();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in &params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for b in &em.bounds {
            buf.extend_from_slice(&b.y_min.to_le_bytes());
            buf.extend_from_slice(&b.y_max.to_le_bytes());
            buf.extend_from_slice(&b.median.to_le_bytes());
        }
        let digest = fnv1a64(&buf);
        buf.extend_from_slice(&digest.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CodecModel> {
        let mut r = ByteReader::new(bytes);
        if r.take(6)? != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let patch_size = r.u8()? as usize;
        let channels_in = r.u8()? as usize;
        let latent_dim = r.u16()? as usize;
        let n_enc = r.u8()? as usize;
        let n_dec = r.u8()? as usize;
        let k_cdf = r.u8()? as usize;
        let center_mode = CenterMode::from_code(r.u8()?)?;
        let mut specs = Vec::with_capacity(n_enc + n_dec);
        for _ in 0..n_enc + n_dec {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let act = Activation::from_code(r.u8()?)?;
            specs.push((in_dim, out_dim, act));
        }
        let param_count = r.u64()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            params.push(r.f64()?);
        }
        let mut bounds = Vec::with_capacity(latent_dim);
        for _ in 0..latent_dim {
            let y_min = r.f64()?;
            let y_max = r.f64()?;
            let median = r.f64()?;
            bounds.push(ChannelBounds {
                y_min,
                y_max,
                median,
            });
        }
        let body_len = r.pos;
        let stored = r.u64()?;
        r.expect_end()?;
        let actual = fnv1a64(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::Format(format!(
                "model hash mismatch: stored {stored:#018x}, computed {actual:#018x}"
            )));
        }

        // Rebuild layers and pour the flat params back in declaration order.
        let mut at = 0usize;
        let mut next = |n: usize| -> &[f64] {
            let s = &params[at..at + n];
            at += n;
            s
        };
        let mut encoder = Vec::with_capacity(n_enc);
        let mut decoder = Vec::with_capacity(n_dec);
        for (i, &(in_dim, out_dim, act)) in specs.iter().enumerate() {
            let w = next(in_dim * out_dim).to_vec();
            let b = next(out_dim).to_vec();
            let layer = DenseLayer {
                in_dim,
                out_dim,
                act,
                w,
                b,
            };
            if i < n_enc {
                encoder.push(layer);
            } else {
                decoder.push(layer);
            }
        }
        let mut layers = Vec::with_capacity(k_cdf);
        for k in 0..k_cdf {
            let w_raw = next(latent_dim).to_vec();
            let b = next(latent_dim).to_vec();
            let a_raw = if k + 1 < k_cdf {
                Some(next(latent_dim).to_vec())
            } else {
                None
            };
            layers.push(CdfLayer { w_raw, b, a_raw });
        }
        if at != params.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: consumed {at} of {}",
                params.len()
            )));
        }
        Ok(CodecModel {
            autoencoder: AutoencoderModel {
                patch_size,
                channels_in,
                latent_dim,
                encoder,
                decoder,
            },
            entropy: EntropyModel {
                latent_dim,
                layers,
                bounds,
            },
            center_mode,
        })
    }

    /// theta, phi, psi flattened in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self
            .autoencoder
            .encoder
            .iter()
            .chain(self.autoencoder.decoder.iter())
        {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        for layer in &self.entropy.layers {
            out.extend_from_slice(&layer.w_raw);
            out.extend_from_slice(&layer.b);
            if let Some(a) = &layer.a_raw {
                out.extend_from_slice(a);
            }
        }
        out
    }

    /// 64-bit digest of the serialized model; changes when any single
    /// parameter changes.
    pub fn model_hash(&self) -> u64 {
        let bytes = self.to_bytes();
        // Trailing 8 bytes are the digest itself.
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<CodecModel> {
        let bytes = std::fs::read(path)?;
        CodecModel::from_bytes(&bytes)
    }
}

/// FNV-1a 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("model file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        Ok(())
    }
}
