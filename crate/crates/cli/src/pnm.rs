//! Binary PPM (P6) and PGM (P5) frames with maxval 255.
//!
//! Byte `b` maps to `2b/255 - 1`; writing rounds back to the nearest byte.
//! Masks are PGM files thresholded at 128.

use std::path::Path;

use svedit_core::{Error, Grid, Result};

pub fn byte_to_real(b: u8) -> f64 {
    2.0 * b as f64 / 255.0 - 1.0
}

pub fn real_to_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected a number at byte {start}")))
    }
}

/// Decodes a P5 or P6 image into `[C, H, W]` reals.
pub fn decode(bytes: &[u8]) -> Result<Grid> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM/PPM file".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}; only 255 is supported")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing separator before raster".into()));
    }
    let raster = &bytes[cur.pos + 1..];
    let n = w * h * channels;
    if w == 0 || h == 0 || raster.len() != n {
        return Err(Error::Format(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    // Interleaved RGB on disk, planar in memory.
    let data = (0..n)
        .map(|k| {
            let (c, p) = (k / (w * h), k % (w * h));
            byte_to_real(raster[p * channels + c])
        })
        .collect();
    Grid::new(vec![channels, h, w], data)
}

pub fn encode(frame: &Grid) -> Result<Vec<u8>> {
    let (c, h, w) = match frame.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::InvalidShape(s.to_vec())),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(real_to_byte(frame.data()[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, frame: &Grid) -> Result<()> {
    std::fs::write(path, encode(frame)?).map_err(|e| Error::io(path, e))
}

/// Reads a single-channel mask as `{0, 1}` with threshold 128.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::Format(format!("{}: masks must be PGM (P5)", path.display())));
    }
    let g = decode(&bytes)?;
    Ok(g.map(|x| if real_to_byte(x) >= 128 { 1.0 } else { 0.0 }))
}

pub fn write_mask(path: &Path, mask: &Grid) -> Result<()> {
    let bin = mask.map(|m| if m >= 0.5 { 1.0 } else { -1.0 });
    write(path, &bin)
}
