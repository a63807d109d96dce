//! TSM matrix files: magic `TSM1`, `u32` rows, `u32` cols, `u32` reserved
//! (zero), then `rows * cols` little-endian `f64` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::util::atomic_write;

pub const MAGIC: &[u8; 4] = b"TSM1";
pub const HEADER_LEN: usize = 16;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "TSM",
        detail: detail.into(),
    }
}

pub fn encode_tsm(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| format_err("row count exceeds u32"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| format_err("column count exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tsm(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!(
            "header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, expected TSM1"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols, reserved) = (word(4), word(8), word(12));
    if reserved != 0 {
        return Err(format_err(format!("reserved header word is {reserved}, expected 0")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(format!("{rows} x {cols} overflows")))?;
    if bytes.len() != expected {
        return Err(format_err(format!(
            "{rows} x {cols} matrix needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_tsm(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &encode_tsm(m)?)
}

pub fn load_tsm(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tsm(&bytes).map_err(|e| match e {
        Error::Format { format, detail } => Error::Format {
            format,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}
