//! Binary embedding cache.
//!
//! Layout, all integers little-endian:
//! `"RFLX"`, version `u32`, rows `u64`, dim `u64`, label count `u64`,
//! `rows × dim` `f64` values row-major, then the labels as `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const RFLX_MAGIC: [u8; 4] = *b"RFLX";
pub const RFLX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8;

pub fn encode_rflx(embeddings: &Matrix, labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + embeddings.data().len() * 8 + labels.len() * 4);
    out.extend_from_slice(&RFLX_MAGIC);
    out.extend_from_slice(&RFLX_VERSION.to_le_bytes());
    out.extend_from_slice(&(embeddings.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(embeddings.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for v in embeddings.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit in u32")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_rflx(bytes: &[u8], path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..4] != RFLX_MAGIC {
        return Err(bad(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != RFLX_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (rows, dim, nlabels) = (u64_at(8), u64_at(16), u64_at(24));
    if rows == 0 || dim == 0 {
        return Err(bad(format!("empty embedding block ({rows}x{dim})")));
    }
    let expected = (rows as u128 * dim as u128 * 8) + nlabels as u128 * 4 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return Err(bad(format!(
            "size mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let (rows, dim) = (rows as usize, dim as usize);
    let body = &bytes[HEADER_LEN..];
    let data: Vec<f64> = body[..rows * dim * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = body[rows * dim * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let m = Matrix::from_vec(rows, dim, data).map_err(|e| bad(e.to_string()))?;
    Ok((m, labels))
}

pub fn write_rflx(path: &Path, embeddings: &Matrix, labels: &[usize]) -> Result<()> {
    fs::write(path, encode_rflx(embeddings, labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_rflx(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rflx(&bytes, path)
}
