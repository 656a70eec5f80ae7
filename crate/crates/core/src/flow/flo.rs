//! Middlebury `.flo` files: little-endian `f32` magic 202021.25, `i32` width,
//! `i32` height, then `height * width` interleaved `(u, v)` `f32` pairs.

use std::fs;
use std::path::Path;

use super::{FlowError, FlowField};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * field.u.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for (u, v) in field.u.iter().zip(&field.v) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField, FlowError> {
    if bytes.len() < 12 {
        return Err(FlowError::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(FlowError::BadMagic(magic));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(FlowError::BadDimensions(w, h));
    }
    let n = w as usize * h as usize;
    let expected = 12 + 8 * n;
    if bytes.len() < expected {
        return Err(FlowError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        u.push(f32::from_le_bytes(word(12 + 8 * i)) as f64);
        v.push(f32::from_le_bytes(word(16 + 8 * i)) as f64);
    }
    FlowField::new(w as usize, h as usize, u, v)
}

pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<(), FlowError> {
    fs::write(path, encode_flo(field))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField, FlowError> {
    decode_flo(&fs::read(path)?)
}
