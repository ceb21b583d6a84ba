//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"KDIA1"
//! per layer:  rows: u64, cols: u64, weight: rows*cols f64 (row-major), bias: cols f64
//! split_index: u64
//! ```
//!
//! There is no layer count; a reader consumes layers until exactly eight
//! bytes (the split index) remain. Floats are stored by bit pattern, so a
//! round trip is bit-exact, NaN payloads included.

use std::fs;
use std::path::Path;

use super::model::{Layer, ModelParams};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"KDIA1";

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + params.param_count() * 8 + params.layers().len() * 16);
    out.extend_from_slice(MAGIC);
    for layer in params.layers() {
        out.extend_from_slice(&(layer.weight.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u64).to_le_bytes());
        for v in layer.weight.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.split_index() as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u64(&mut self) -> Result<u64> {
        if self.remaining() < 8 {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let bytes: [u8; 8] = self.buf[self.pos..self.pos + 8].try_into().expect("eight bytes");
        self.pos += 8;
        Ok(u64::from_le_bytes(bytes))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| Error::Checkpoint(format!("{n} floats overrun the buffer at byte {}", self.pos)))?;
        let out = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect();
        self.pos += bytes;
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing KDIA1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut layers = Vec::new();
    while r.remaining() > 8 {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("layer {} shape overflows", layers.len())))?;
        let weight = Tensor2::from_vec(rows, cols, r.f64s(count)?)?;
        let bias = r.f64s(cols)?;
        layers.push(Layer { weight, bias });
    }
    let split = r.u64()? as usize;
    if r.remaining() != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ModelParams::new(layers, split).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
