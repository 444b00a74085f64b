//! Binary PPM (P6) images.
//!
//! Layout: `"P6\n<w> <h>\n255\n"` followed by `w * h` RGB triples, row-major.
//! Values in `[-1, 1]` map to bytes through `round((x + 1) * 127.5)`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height * 3],
        }
    }

    /// Converts a channel-planar `[C, S, S]` tensor with `C` of 1 or 3.
    pub fn from_planar(x: &Tensor, channels: usize, side: usize) -> Result<Self> {
        if !(channels == 1 || channels == 3) || x.len() != channels * side * side {
            return Err(Error::invalid(format!(
                "tensor of {} values is not a {channels}x{side}x{side} image",
                x.len()
            )));
        }
        let plane = side * side;
        let mut pixels = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                let ch = if channels == 1 { 0 } else { c };
                pixels.push(to_byte(x.data()[ch * plane + p]));
            }
        }
        Self::new(side, side, pixels)
    }

    fn blit(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.pixels[dst..dst + src.width * 3].copy_from_slice(&src.pixels[s..s + src.width * 3]);
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses the exact header layout written by [`RgbImage::encode_ppm`].
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            let end = bytes[pos..]
                .iter()
                .position(|b| b.is_ascii_whitespace())
                .ok_or_else(|| bad("truncated header"))?;
            fields.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header"))?);
            pos += end + 1;
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        Self::new(w, h, bytes[pos..].to_vec())
    }
}

/// Tiles images of equal size into a grid `cols` wide with `pad` pixels of
/// black between and around tiles.
pub fn tile_grid(tiles: &[RgbImage], cols: usize, pad: usize) -> Result<RgbImage> {
    let first = tiles.first().ok_or_else(|| Error::invalid("no tiles"))?;
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (tw, th) = (first.width, first.height);
    if tiles.iter().any(|t| t.width != tw || t.height != th) {
        return Err(Error::invalid("tiles differ in size"));
    }
    let cols = cols.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut grid = RgbImage::filled(cols * (tw + pad) + pad, rows * (th + pad) + pad, 0);
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        grid.blit(t, pad + c * (tw + pad), pad + r * (th + pad));
    }
    Ok(grid)
}
