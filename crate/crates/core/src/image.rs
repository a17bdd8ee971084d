use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::data(format!(
                "{width}x{height} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }
}

impl GrayImage {
    /// Binary 16-bit portable graymap. Values are clamped to `[0, 1]` and
    /// scaled to `0..=65535`; `comment` lines go into the header.
    pub fn to_pgm16(&self, comment: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 2 * self.pixels.len());
        out.extend_from_slice(b"P5\n");
        for line in comment.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        out.extend_from_slice(format!("{} {}\n65535\n", self.width, self.height).as_bytes());
        for &v in &self.pixels {
            out.extend_from_slice(&to_u16(v).to_be_bytes());
        }
        out
    }

    pub fn from_pgm16(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::data("not a binary portable graymap"));
        }
        for f in fields.iter_mut() {
            let tok = next_token(bytes, &mut pos)?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data("malformed graymap header"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 65535 {
            return Err(Error::data(format!("expected a 16-bit graymap, max value is {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = bytes.get(pos + 1..).unwrap_or_default();
        if body.len() != 2 * width * height {
            return Err(Error::data(format!(
                "graymap raster holds {} bytes, expected {}",
                body.len(),
                2 * width * height
            )));
        }
        let pixels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0).collect();
        GrayImage::new(width, height, pixels)
    }

    /// Rounds every pixel to the nearest value a 16-bit graymap can store.
    pub fn quantize_u16(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = to_u16(*v) as f64 / 65535.0);
    }
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::data("truncated graymap header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}
