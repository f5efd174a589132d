//! End-to-end image encode/decode: patch grid, latent quantization, table
//! construction, range coding and the bitstream container.
//!
//! Encode: split the image into `P x P` patches (edge-replicated padding on
//! the right/bottom), push each patch through the encoder, clamp latents to
//! the trained bounds, center on the channel medians (or zero), dead-zone
//! quantize, and range-code with per-channel tables. Decode mirrors it:
//! rebuild the same tables from the header and model, decode symbols,
//! dequantize, re-add the centers, run the decoder, crop the padding.
//!
//! Q and offset are snapped through their f32 header representation before
//! any arithmetic so both sides build identical tables.

use crate::coder::{
    range_decode, range_encode, read_bitstream, write_bitstream, BitstreamHeader, FrequencyTable,
    FLAG_ZERO_CENTERED,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics;
use crate::model::{CenterMode, CodecModel};
use crate::quant::{
    dead_zone_quantize, dequantize, symbol_bounds, build_frequency_table, QuantConfig, SymbolPlane,
    OFFSET_SWEEP, Q_SWEEP,
};

/// Patch tiling of an image, including replication padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub cols: usize,
    pub rows: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn for_image(width: usize, height: usize, patch: usize) -> PatchGrid {
        PatchGrid {
            cols: width.div_ceil(patch),
            rows: height.div_ceil(patch),
            patch,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.cols * self.rows
    }
}

/// Channel-planar [0,1] patch with edge replication beyond the image.
fn padded_patch(img: &Image, px: usize, py: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p * p * img.channels);
    for c in 0..img.channels {
        for dy in 0..p {
            let y = (py * p + dy).min(img.height - 1);
            for dx in 0..p {
                let x = (px * p + dx).min(img.width - 1);
                out.push(img.sample01(x, y, c));
            }
        }
    }
    out
}

/// Everything produced by the analysis half of the encoder.
pub struct EncodePlan {
    pub header: BitstreamHeader,
    pub plane: SymbolPlane,
    pub tables: Vec<FrequencyTable>,
}

impl EncodePlan {
    /// Ideal entropy of the symbol plane under its own tables, in bits.
    pub fn estimated_bits(&self) -> f64 {
        self.plane
            .symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| self.tables[i % self.plane.n_channels].bits_of(s))
            .sum()
    }
}

fn per_channel_centers(model: &CodecModel) -> Vec<f64> {
    (0..model.autoencoder.latent_dim)
        .map(|ch| model.center(ch))
        .collect()
}

fn build_tables(
    model: &CodecModel,
    cfg: &QuantConfig,
    centers: &[f64],
    bounds: &[(i64, i64)],
) -> Result<Vec<FrequencyTable>> {
    bounds
        .iter()
        .enumerate()
        .map(|(ch, &(s_min, s_max))| {
            build_frequency_table(|v| model.entropy.cdf(ch, v), s_min, s_max, cfg, centers[ch])
        })
        .collect()
}

/// Analysis: patches -> latents -> symbols + tables + header.
pub fn encode_plan(image: &Image, model: &CodecModel, quant: &QuantConfig) -> Result<EncodePlan> {
    let ae = &model.autoencoder;
    if image.channels != ae.channels_in {
        return Err(Error::Config(format!(
            "image has {} channels, model wants {}",
            image.channels, ae.channels_in
        )));
    }
    if image.width > u16::MAX as usize || image.height > u16::MAX as usize {
        return Err(Error::Config("image dimensions exceed u16".into()));
    }
    let cfg = quant.snapped_to_header();
    let n = ae.latent_dim;
    let grid = PatchGrid::for_image(image.width, image.height, ae.patch_size);
    let centers = per_channel_centers(model);

    // Per-channel symbol bounds from the trained latent bounds.
    let mut bounds = Vec::with_capacity(n);
    for ch in 0..n {
        let b = model.entropy.bounds[ch];
        let (lo, hi) = symbol_bounds(b.y_min, b.y_max, centers[ch], &cfg);
        if lo < i16::MIN as i64 || hi > i16::MAX as i64 {
            return Err(Error::Config(format!(
                "symbol bounds [{lo}, {hi}] of channel {ch} exceed i16 at Q {}",
                cfg.q
            )));
        }
        bounds.push((lo, hi));
    }

    let mut symbols = Vec::with_capacity(grid.num_patches() * n);
    for py in 0..grid.rows {
        for px in 0..grid.cols {
            let patch = padded_patch(image, px, py, ae.patch_size);
            let y = ae.encode_latent(&patch)?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite latent at patch ({px}, {py})"
                )));
            }
            for ch in 0..n {
                let b = model.entropy.bounds[ch];
                let clamped = y[ch].clamp(b.y_min, b.y_max);
                let s = dead_zone_quantize(clamped - centers[ch], &cfg);
                symbols.push(s.clamp(bounds[ch].0, bounds[ch].1));
            }
        }
    }

    let tables = build_tables(model, &cfg, &centers, &bounds)?;
    let header = BitstreamHeader {
        flags: match model.center_mode {
            CenterMode::Zero => FLAG_ZERO_CENTERED,
            CenterMode::Median => 0,
        },
        width: image.width as u16,
        height: image.height as u16,
        channels: image.channels as u8,
        patch_size: ae.patch_size as u8,
        latent_dim: n as u16,
        q: cfg.q as f32,
        offset: cfg.offset as f32,
        model_hash: model.model_hash(),
        symbol_bounds: bounds.iter().map(|&(lo, hi)| (lo as i16, hi as i16)).collect(),
    };
    Ok(EncodePlan {
        header,
        plane: SymbolPlane {
            n_units: grid.num_patches(),
            n_channels: n,
            symbols,
        },
        tables,
    })
}

/// Full encode: analysis, range coding, container.
pub fn encode_image(image: &Image, model: &CodecModel, quant: &QuantConfig) -> Result<Vec<u8>> {
    let plan = encode_plan(image, model, quant)?;
    let payload = range_encode(&plan.plane, &plan.tables)?;
    write_bitstream(&plan.header, &payload)
}

/// Entropy-decode a bitstream back to its symbol plane (no pixel synthesis).
pub fn decode_plan(bytes: &[u8], model: &CodecModel) -> Result<(BitstreamHeader, SymbolPlane)> {
    let (header, payload) = read_bitstream(bytes)?;
    let expected = model.model_hash();
    if header.model_hash != expected {
        return Err(Error::ModelMismatch(format!(
            "bitstream was produced by model {:#018x}, supplied model is {expected:#018x}",
            header.model_hash
        )));
    }
    let ae = &model.autoencoder;
    if header.patch_size as usize != ae.patch_size
        || header.channels as usize != ae.channels_in
        || header.latent_dim as usize != ae.latent_dim
    {
        return Err(Error::Format("header geometry disagrees with model".into()));
    }
    let cfg = QuantConfig::new(header.q as f64, header.offset as f64)?;
    let centers: Vec<f64> = if header.flags & FLAG_ZERO_CENTERED != 0 {
        vec![0.0; ae.latent_dim]
    } else {
        (0..ae.latent_dim)
            .map(|ch| model.entropy.bounds[ch].median)
            .collect()
    };
    let bounds: Vec<(i64, i64)> = header
        .symbol_bounds
        .iter()
        .map(|&(lo, hi)| (lo as i64, hi as i64))
        .collect();
    let tables = build_tables(model, &cfg, &centers, &bounds)?;
    let grid = PatchGrid::for_image(header.width as usize, header.height as usize, ae.patch_size);
    let count = grid.num_patches() * ae.latent_dim;
    let symbols = range_decode(&payload, &tables, count)?;
    Ok((
        header,
        SymbolPlane {
            n_units: grid.num_patches(),
            n_channels: ae.latent_dim,
            symbols,
        },
    ))
}

/// Full decode: symbols -> latents -> patches -> cropped image.
pub fn decode_image(bytes: &[u8], model: &CodecModel) -> Result<Image> {
    let (header, plane) = decode_plan(bytes, model)?;
    let ae = &model.autoencoder;
    let p = ae.patch_size;
    let (w, h, c) = (
        header.width as usize,
        header.height as usize,
        header.channels as usize,
    );
    let cfg = QuantConfig::new(header.q as f64, header.offset as f64)?;
    let centers: Vec<f64> = if header.flags & FLAG_ZERO_CENTERED != 0 {
        vec![0.0; ae.latent_dim]
    } else {
        (0..ae.latent_dim)
            .map(|ch| model.entropy.bounds[ch].median)
            .collect()
    };
    let grid = PatchGrid::for_image(w, h, p);
    let mut pixels = vec![0u8; w * h * c];
    for py in 0..grid.rows {
        for px in 0..grid.cols {
            let unit = py * grid.cols + px;
            let y: Vec<f64> = (0..ae.latent_dim)
                .map(|ch| dequantize(plane.get(unit, ch), &cfg) + centers[ch])
                .collect();
            let xhat = ae.decode_latent(&y)?;
            for ch in 0..c {
                for dy in 0..p {
                    let iy = py * p + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..p {
                        let ix = px * p + dx;
                        if ix >= w {
                            continue;
                        }
                        let v = xhat[ch * p * p + dy * p + dx];
                        let q = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                        pixels[(iy * w + ix) * c + ch] = q;
                    }
                }
            }
        }
    }
    Image::new(w, h, c, pixels)
}

/// One row of a rate-distortion sweep.
#[derive(Clone, Copy, Debug)]
pub struct RdPoint {
    pub q: f64,
    pub offset: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim_db: f64,
}

/// Sweep a trained model over the (offset, Q) grid on a fixture set.
/// bpp aggregates total compressed bits (header included) over total pixels;
/// PSNR and MS-SSIM dB are means over the images. Rows are ordered by
/// offset, then Q.
pub fn rd_sweep(
    images: &[Image],
    model: &CodecModel,
    qs: &[f64],
    offsets: &[f64],
) -> Result<Vec<RdPoint>> {
    if images.is_empty() {
        return Err(Error::Config("rd_sweep needs at least one image".into()));
    }
    let mut qs = qs.to_vec();
    qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut offsets = offsets.to_vec();
    offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(qs.len() * offsets.len());
    for &offset in &offsets {
        for &q in &qs {
            let cfg = QuantConfig::new(q, offset)?;
            let mut total_bits = 0.0;
            let mut total_pixels = 0.0;
            let mut psnr_acc = 0.0;
            let mut msssim_acc = 0.0;
            for img in images {
                let bytes = encode_image(img, model, &cfg)?;
                let recon = decode_image(&bytes, model)?;
                total_bits += 8.0 * bytes.len() as f64;
                total_pixels += img.num_pixels() as f64;
                psnr_acc += metrics::psnr(img, &recon)?;
                msssim_acc += metrics::msssim_db(metrics::ms_ssim(img, &recon)?);
            }
            out.push(RdPoint {
                q,
                offset,
                bpp: total_bits / total_pixels,
                psnr_db: psnr_acc / images.len() as f64,
                msssim_db: msssim_acc / images.len() as f64,
            });
        }
    }
    Ok(out)
}

/// The stock 33-point sweep grid.
pub fn rd_sweep_default(images: &[Image], model: &CodecModel) -> Result<Vec<RdPoint>> {
    rd_sweep(images, model, &Q_SWEEP, &OFFSET_SWEEP)
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from("Q,offset,bpp,psnr_db,msssim_db\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            p.q, p.offset, p.bpp, p.psnr_db, p.msssim_db
        ));
    }
    out
}
