//! Flat binary checkpoints shared by the encoders and the denoiser.
//!
//! Layout (all integers `u32` LE): 8 magic bytes, header word count, header
//! words, tensor count, then per tensor its rank and dims, then every
//! parameter value as `f64` LE in declaration order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{lit, to_f64, Grid, Scalar};

pub fn encode<S: Scalar>(magic: &[u8; 8], header: &[u32], tensors: &[&Grid<S>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in tensors {
        for &v in t.data() {
            out.extend_from_slice(&to_f64(v).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Returns the header words and the tensors, checking the magic.
pub fn decode<S: Scalar>(bytes: &[u8], magic: &[u8; 8]) -> Result<(Vec<u32>, Vec<Grid<S>>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let nh = r.u32()? as usize;
    let header = (0..nh).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let nt = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(nt);
    for _ in 0..nt {
        let rank = r.u32()? as usize;
        shapes.push((0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
    }
    let mut tensors = Vec::with_capacity(nt);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64().map(lit)).collect::<Result<Vec<S>>>()?;
        tensors.push(Grid::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((header, tensors))
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Grid::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let b = Grid::<f64>::from_fn(&[4], |i| -(i as f64));
        let bytes = encode(b"TESTCKPT", &[7, 9], &[&a, &b]);
        let (h, t) = decode::<f64>(&bytes, b"TESTCKPT").unwrap();
        assert_eq!(h, vec![7, 9]);
        assert_eq!(t, vec![a, b]);
        assert!(decode::<f64>(&bytes, b"OTHERMAG").is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1], b"TESTCKPT").is_err());
    }
}
