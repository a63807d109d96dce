//! WGT1 named-tensor files: magic `WGT1`, `u32` tensor count, then per tensor
//! a `u32`-length-prefixed UTF-8 name, `u32` rank, `u32` dims and
//! little-endian `f64` values. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Params, Tensor};
use crate::util::atomic_write;

pub const MAGIC: &[u8; 4] = b"WGT1";

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "WGT1",
        detail: detail.into(),
    }
}

pub fn encode_weights(params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err("bad magic, expected WGT1"));
    }
    let count = r.u32("tensor count")?;
    let mut params = Params::new();
    let mut previous = String::from("<header>");
    for _ in 0..count {
        let name_len = r.u32(&format!("name length after `{previous}`"))?;
        let name_bytes = r.take(name_len, &format!("name after `{previous}`"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| format_err(format!("tensor name after `{previous}` is not UTF-8")))?
            .to_string();
        let rank = r.u32(&format!("rank of `{name}`"))?;
        if rank > Tensor::MAX_RANK {
            return Err(Error::shape(format!(
                "tensor `{name}` declares rank {rank} (max {})",
                Tensor::MAX_RANK
            )));
        }
        let dims = (0..rank)
            .map(|_| r.u32(&format!("dims of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::shape(format!("tensor `{name}` dims {dims:?} overflow")))?;
        let payload = r.take(n, &format!("values of `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(format_err(format!("duplicate tensor `{name}`")));
        }
        previous = name;
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save_weights(path: &Path, params: &Params) -> Result<()> {
    atomic_write(path, &encode_weights(params))
}

pub fn load_weights(path: &Path) -> Result<Params> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
