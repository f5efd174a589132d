//! 8-bit images and binary PGM (P5) / PPM (P6) parsing and writing.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

/// An 8-bit grayscale or RGB image. Pixels are interleaved row-major;
/// metric and codec math uses the `[0,1]`-normalized view.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("empty image".into()));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Config(format!(
                "pixel buffer {} does not match {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Normalized [0,1] value of one sample.
    pub fn sample01(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixel(x, y, c) as f64 / 255.0
    }

    /// One channel plane as f64 on the 0-255 scale (metric convention).
    pub fn plane255(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.pixel(x, y, c) as f64);
            }
        }
        out
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

fn is_pnm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

struct HeaderScanner<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.data.len() && is_pnm_space(self.data[self.pos]) {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected integer in PNM header".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("unparsable integer in PNM header".into()))
    }
}

/// Parse a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn parse_pnm(data: &[u8]) -> Result<Image> {
    if data.len() < 2 {
        return Err(Error::Format("file too short for a PNM magic".into()));
    }
    let channels = match &data[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::Format("not a binary PGM (P5) or PPM (P6)".into())),
    };
    let mut scan = HeaderScanner { data, pos: 2 };
    let width = scan.number()?;
    let height = scan.number()?;
    let maxval = scan.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if scan.pos >= data.len() || !is_pnm_space(data[scan.pos]) {
        return Err(Error::Format("missing whitespace before PNM raster".into()));
    }
    let raster = &data[scan.pos + 1..];
    let expected = width * height * channels;
    if raster.len() < expected {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {expected}",
            raster.len()
        )));
    }
    if raster.len() > expected {
        return Err(Error::Format("trailing bytes after PNM raster".into()));
    }
    Image::new(width, height, channels, raster.to_vec())
}

/// Serialize in canonical form: `P5|P6\n<w> <h>\n255\n<raster>`.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn load_pnm(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_pnm(&buf)
}

pub fn save_pnm(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_two_pixels() {
        let bytes = b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff";
        let img = parse_pnm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.pixel(0, 0, 0), 0);
        assert_eq!(img.pixel(1, 0, 2), 255);
    }

    #[test]
    fn p5_with_comment() {
        let bytes = b"P5 # a comment\n3 2\n# another\n255\n\x01\x02\x03\x04\x05\x06";
        let img = parse_pnm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.pixel(2, 1, 0), 6);
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00";
        match parse_pnm(bytes) {
            Err(Error::Format(m)) => assert!(m.contains("maxval"), "{m}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_raster_rejected() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        assert!(parse_pnm(bytes).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(parse_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_pnm(b"BM\x00\x00").is_err());
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let img = Image::new(2, 2, 3, (0..12).map(|i| (i * 20) as u8).collect()).unwrap();
        let bytes = encode_pnm(&img);
        let back = parse_pnm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_pnm(&back), bytes);
    }
}
