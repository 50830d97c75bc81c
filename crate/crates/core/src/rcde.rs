//! RCDE embedding files.
//!
//! ```text
//! "RCDE" 0x01 | n: u32 LE | d: u32 LE | n*d f32 LE, row-major | L: u32 LE | L bytes UTF-8 JSON
//! ```
//!
//! The JSON trailer is `{"labels": {attr: [per-row values]} | null, "source": string, "dim": d}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingMatrix, LabelMap};
use crate::error::{Error, FormatError, Result};
use crate::io::write_atomic;

pub const MAGIC: [u8; 4] = *b"RCDE";
pub const VERSION: u8 = 0x01;
/// Magic, version, `n` and `d`.
pub const HEADER_LEN: usize = 13;

#[derive(Serialize, Deserialize)]
struct Trailer {
    labels: Option<LabelMap>,
    source: String,
    dim: usize,
}

pub fn to_bytes(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let trailer = serde_json::to_vec(&Trailer {
        labels: matrix.labels().cloned(),
        source: matrix.source().to_string(),
        dim: matrix.dim(),
    })
    .expect("trailer serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.values().len() + 4 + trailer.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    for v in matrix.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingMatrix, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let count = n.checked_mul(d).and_then(|c| c.checked_mul(4)).ok_or(FormatError::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    let values: Vec<f32> = r
        .take(count)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let trailer_len = r.u32()? as usize;
    let trailer: Trailer =
        serde_json::from_slice(r.take(trailer_len)?).map_err(|e| FormatError::Trailer(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    if trailer.dim != d {
        return Err(FormatError::DimMismatch { header: d, trailer: trailer.dim });
    }
    if d == 0 {
        return Err(FormatError::Trailer("dimension must be at least 1".into()));
    }
    if let Some(labels) = &trailer.labels {
        for (attribute, column) in labels {
            if column.len() != n {
                return Err(FormatError::LabelLength { attribute: attribute.clone(), got: column.len(), rows: n });
            }
        }
    }
    EmbeddingMatrix::new(n, d, values, trailer.labels, trailer.source)
        .map_err(|e| FormatError::Trailer(e.to_string()))
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    write_atomic(path, &to_bytes(matrix))?;
    Ok(path.to_path_buf())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}
