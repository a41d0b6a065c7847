//! Little-endian binary file primitives shared by the corpus embedding
//! store, the persisted indexes, and encoder checkpoints.
//!
//! The embedding block layout ("EDF1") is a 16-byte header — 4 ASCII magic
//! bytes, `u32` row count, `u32` dimension, `u32` reserved zero — followed
//! by `count * dim` little-endian `f32` values in record order.

use std::io::{self, Read, Write};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EDF1";

#[derive(Debug, thiserror::Error)]
pub enum BinReadError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed header: {0}")]
    BadHeader(String),
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32s<W: Write>(w: &mut W, vs: &[f32]) -> io::Result<()> {
    // One pass through a byte buffer instead of 4-byte writes.
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_u64s<W: Write>(w: &mut W, vs: &[u64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<(), BinReadError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            BinReadError::Truncated { context }
        } else {
            BinReadError::Io(e)
        }
    })
}

pub fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32, BinReadError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read, context: &'static str) -> Result<u64, BinReadError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f32s(r: &mut impl Read, n: usize, context: &'static str) -> Result<Vec<f32>, BinReadError> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, context)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_u64s(r: &mut impl Read, n: usize, context: &'static str) -> Result<Vec<u64>, BinReadError> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, context)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn check_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<(), BinReadError> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found, "magic")?;
    if found != expected {
        return Err(BinReadError::MagicMismatch { expected, found });
    }
    Ok(())
}

/// Row-major `f32` matrix as stored in an embedding block.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub dim: usize,
    /// `count * dim` values, row-major.
    pub data: Vec<f32>,
}

impl EmbeddingBlock {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn write_embedding_block<W: Write>(w: &mut W, dim: usize, rows: &[f32]) -> io::Result<()> {
    assert!(dim > 0 && rows.len() % dim == 0, "row data not a multiple of dim");
    w.write_all(&EMBEDDING_MAGIC)?;
    write_u32(w, (rows.len() / dim) as u32)?;
    write_u32(w, dim as u32)?;
    write_u32(w, 0)?;
    write_f32s(w, rows)
}

pub fn read_embedding_block(r: &mut impl Read) -> Result<EmbeddingBlock, BinReadError> {
    check_magic(r, EMBEDDING_MAGIC)?;
    let count = read_u32(r, "embedding count")? as usize;
    let dim = read_u32(r, "embedding dim")? as usize;
    let reserved = read_u32(r, "reserved field")?;
    if reserved != 0 {
        return Err(BinReadError::BadHeader(format!("reserved field = {reserved}, want 0")));
    }
    if dim == 0 && count > 0 {
        return Err(BinReadError::BadHeader("zero dim with nonzero count".into()));
    }
    let data = read_f32s(r, count * dim, "embedding rows")?;
    Ok(EmbeddingBlock { dim, data })
}
