//! Middlebury `.flo` optical flow files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FLO_MAGIC: f32 = 202021.25;

/// Encodes a `(1, 2, h, w)` flow field.
pub fn encode_flo<T: Real>(flow: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = flow.shape();
    if n != 1 || c != 2 {
        return Err(Error::shape(".flo payload", [1, 2, h, w], flow.shape()));
    }
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    for i in 0..h * w {
        out.extend_from_slice(&(u[i].as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(v[i].as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: String| Error::format(".flo", m);
    if bytes.len() < 12 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |k: usize| -> [u8; 4] { bytes[4 * k..4 * k + 4].try_into().expect("4 bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(bad(format!("bad magic {magic}")));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(bad(format!("non-positive size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + h * w * 8;
    if bytes.len() != expected {
        return Err(bad(format!("payload is {} bytes, expected {expected} for {w}x{h}", bytes.len())));
    }
    let mut data = vec![T::zero(); 2 * h * w];
    for i in 0..h * w {
        data[i] = T::of(f32::from_le_bytes(word(3 + 2 * i)) as f64);
        data[h * w + i] = T::of(f32::from_le_bytes(word(4 + 2 * i)) as f64);
    }
    Tensor::from_vec([1, 2, h, w], data)
}

pub fn write_flo<T: Real>(path: impl AsRef<Path>, flow: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_flo(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
