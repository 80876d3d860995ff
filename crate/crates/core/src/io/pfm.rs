//! Single-channel float maps: `Pf\n<w> <h>\n-1.0\n` then little-endian
//! `f32` rows, bottom row first.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn encode_pfm(plane: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if plane.len() != h * w {
        return Err(Error::shape("float map", h * w, plane.len()));
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for v in &plane[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns `(values, h, w)` in top-to-bottom row order.
pub fn decode_pfm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let bad = |m: String| Error::format("float map", m);
    let mut fields = Vec::with_capacity(3);
    let mut pos = 0;
    for _ in 0..3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        fields.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not ASCII".into()))?);
        pos += end + 1;
    }
    if fields[0] != "Pf" {
        return Err(bad(format!("expected single-channel `Pf`, got `{}`", fields[0])));
    }
    let dims: Vec<usize> = fields[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad(format!("bad size `{}`", fields[1]))))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(bad(format!("bad size `{}`", fields[1])));
    };
    let scale: f64 = fields[2].trim().parse().map_err(|_| bad(format!("bad scale `{}`", fields[2])))?;
    if scale >= 0.0 {
        return Err(bad("big-endian float maps are not supported".into()));
    }
    let payload = &bytes[pos..];
    if payload.len() != h * w * 4 {
        return Err(bad(format!("payload is {} bytes, expected {} for {w}x{h}", payload.len(), h * w * 4)));
    }
    let mut values = vec![0f32; h * w];
    for (row, chunk) in payload.chunks_exact(w * 4).enumerate() {
        let y = h - 1 - row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            values[y * w + x] = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    Ok((values, h, w))
}

pub fn write_pfm<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>, n: usize, c: usize) -> Result<()> {
    let path = path.as_ref();
    let plane: Vec<f32> = t.plane(n, c).iter().map(|v| v.as_f64() as f32).collect();
    std::fs::write(path, encode_pfm(&plane, t.height(), t.width())?).map_err(|e| Error::io(path, e))
}

/// Reads one map as a `(1, 1, h, w)` tensor.
pub fn read_pfm<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let (v, h, w) = decode_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)?;
    Tensor::from_vec([1, 1, h, w], v.into_iter().map(|x| T::of(x as f64)).collect())
}

/// `<stem>.c<k>.pfm` next to `stem`.
pub fn channel_path(stem: impl AsRef<Path>, k: usize) -> PathBuf {
    let stem = stem.as_ref();
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}.c{k}.pfm"))
}

/// Writes every channel of sample 0 as `<stem>.c<k>.pfm`.
pub fn write_channels<T: Real>(stem: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    for k in 0..t.channels() {
        write_pfm(channel_path(&stem, k), t, 0, k)?;
    }
    Ok(())
}

/// Reads `channels` maps `<stem>.c0.pfm ...` into one `(1, channels, h, w)` tensor.
pub fn read_channels<T: Real>(stem: impl AsRef<Path>, channels: usize) -> Result<Tensor<T>> {
    let mut planes = Vec::with_capacity(channels);
    for k in 0..channels {
        let path = channel_path(&stem, k);
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "missing channel {k} of {channels}: {} does not exist",
                path.display()
            )));
        }
        planes.push(read_pfm::<T>(&path)?);
    }
    Tensor::concat_channels(&planes.iter().collect::<Vec<_>>())
}
