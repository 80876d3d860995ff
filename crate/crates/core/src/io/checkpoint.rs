//! Versioned binary checkpoints.
//!
//! ```text
//! "PPAC0001"
//! kind, task, normalization mode   each u8 length + ASCII
//! u32 parameter count, then per parameter a record:
//!     u32 name length, name, u8 dtype (0 f32, 1 f64), u32 rank, u64 dims, LE values
//! u32 parameter count, then per parameter its Adam state:
//!     record `<name>.m` (f64), record `<name>.v` (f64), u64 step
//! ```

use std::path::Path;

use crate::adaptive::NormalizationMode;
use crate::error::{Error, Result};
use crate::net::{NetKind, RefinementNet, Task};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPAC0001";

fn put_tag(out: &mut Vec<u8>, tag: &str) {
    out.push(tag.len() as u8);
    out.extend_from_slice(tag.as_bytes());
}

fn put_record_header(out: &mut Vec<u8>, name: &str, dtype: DType, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Real>(net: &RefinementNet<T>) -> Vec<u8> {
    let store = net.params();
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_tag(&mut out, net.kind().tag());
    put_tag(&mut out, net.task().tag());
    put_tag(&mut out, net.normalization_mode().as_str());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        put_record_header(&mut out, &p.name, T::DTYPE, &p.value.shape());
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        for (suffix, moment) in [("m", &p.m), ("v", &p.v)] {
            put_record_header(&mut out, &format!("{}.{suffix}", p.name), DType::F64, &p.value.shape());
            for &v in moment {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(&p.step.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Record {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    values: Vec<f64>,
    raw_start: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tag(&mut self) -> Result<String> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "tag is not UTF-8"))
    }

    fn record(&mut self) -> Result<Record> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown dtype tag {tag} for `{name}`")))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|l| l.checked_mul(dtype.size()).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::format("checkpoint", format!("implausible dims {dims:?} for `{name}`")))?;
        let raw_start = self.pos;
        let raw = self.take(len * dtype.size())?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        Ok(Record {
            name,
            dtype,
            dims,
            values,
            raw_start,
        })
    }
}

/// Rebuilds the network described by the checkpoint header and loads its
/// parameters and Adam state. Values stored at another precision are cast.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<RefinementNet<T>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "missing PPAC0001 header"));
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let kind: NetKind = cur.tag()?.parse()?;
    let task: Task = cur.tag()?.parse()?;
    let mode: NormalizationMode = cur.tag()?.parse()?;
    let mut net = RefinementNet::<T>::build_with_mode(kind, task, mode, 0)?;
    let count = cur.u32()? as usize;
    if count != net.params().len() {
        return Err(Error::format(
            "checkpoint",
            format!("{count} parameters stored, {}-{} has {}", kind.tag(), task.tag(), net.params().len()),
        ));
    }
    let find = |net: &RefinementNet<T>, r: &Record, name: &str| {
        let id = net
            .params()
            .find(name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter `{name}`")))?;
        let shape = net.params().value(id).shape();
        if r.dims != shape {
            return Err(Error::format(
                "checkpoint",
                format!("`{}` has dims {:?}, expected {shape:?}", r.name, r.dims),
            ));
        }
        Ok(id)
    };
    for _ in 0..count {
        let r = cur.record()?;
        let id = find(&net, &r, &r.name)?;
        let value = if r.dtype == T::DTYPE {
            let raw = &bytes[r.raw_start..r.raw_start + r.values.len() * T::DTYPE.size()];
            raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
        } else {
            r.values.iter().map(|&v| T::of(v)).collect()
        };
        *net.params_mut().value_mut(id) = Tensor::from_vec(net.params().value(id).shape(), value)?;
    }
    let adam = cur.u32()? as usize;
    if adam != count {
        return Err(Error::format("checkpoint", format!("{adam} optimizer records for {count} parameters")));
    }
    for _ in 0..count {
        let m = cur.record()?;
        let v = cur.record()?;
        let step = cur.u64()?;
        let name = m
            .name
            .strip_suffix(".m")
            .ok_or_else(|| Error::format("checkpoint", format!("expected a first moment, got `{}`", m.name)))?
            .to_string();
        if v.name != format!("{name}.v") || m.dtype != DType::F64 || v.dtype != DType::F64 {
            return Err(Error::format("checkpoint", format!("malformed optimizer state for `{name}`")));
        }
        let id = find(&net, &m, &name)?;
        find(&net, &v, &name)?;
        let p = net.params_mut().param_mut(id);
        p.m = m.values;
        p.v = v.values;
        p.step = step;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, net: &RefinementNet<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<RefinementNet<T>> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let net = RefinementNet::<f32>::build(NetKind::Pac, Task::Flow, 0).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(&bytes[..8], b"PPAC0001");
        assert_eq!(&bytes[8..12], b"\x03pac");
        assert_eq!(&bytes[12..17], b"\x04flow");
        assert_eq!(&bytes[17..26], b"\x08advanced");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Segmentation, 3).unwrap();
        net.set_normalization_mode(NormalizationMode::Kernel);
        let p = net.params_mut().param_mut(crate::train::ParamId(2));
        p.m[0] = 0.25;
        p.step = 7;
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back.normalization_mode(), NormalizationMode::Kernel);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let net = RefinementNet::<f32>::build(NetKind::Simple, Task::Flow, 0).unwrap();
        let bytes = encode_checkpoint(&net);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
        assert!(decode_checkpoint::<f32>(b"PPAC0002").is_err());
    }
}
