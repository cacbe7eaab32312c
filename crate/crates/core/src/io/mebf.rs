//! MEBF: a small little-endian container for embedding dumps.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MEBF"
//! 4       1     version (1)
//! 5       1     record type: 1 = frame tensor, 2 = text embedding
//! type 1: u32 T, u32 h, u32 w, u32 d, then T*h*w*d f32 (frame-major, row-major)
//! type 2: u32 d, u32 M, then d f32, then M u32 token ids
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on read.

use std::path::Path;

use thiserror::Error;

use super::{EmbeddingError, FrameEmbeddings, TextEmbedding};

pub const MAGIC: &[u8; 4] = b"MEBF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordType {
    Frames = 1,
    Text = 2,
}

#[derive(Debug, Error)]
pub enum MebfError {
    #[error("bad magic {0:02x?}, expected \"MEBF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported MEBF version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown record type {0}")]
    UnknownRecordType(u8),
    #[error("expected record type {expected:?}, found {found:?}")]
    WrongRecordType { expected: RecordType, found: RecordType },
    #[error("truncated: need {needed} bytes, file has {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("header dimensions overflow: {0}")]
    DimensionOverflow(String),
    #[error("{0} trailing bytes after payload")]
    TrailingData(u64),
    #[error(transparent)]
    Invalid(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const HEADER: usize = 6;

fn header(bytes: &[u8]) -> Result<RecordType, MebfError> {
    if bytes.len() < HEADER {
        // A short file that already disagrees on the magic is reported as such.
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        if bytes.len() >= 4 && &m != MAGIC {
            return Err(MebfError::BadMagic(m));
        }
        return Err(MebfError::Truncated {
            needed: HEADER as u64,
            available: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(MebfError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(MebfError::UnsupportedVersion(bytes[4]));
    }
    match bytes[5] {
        1 => Ok(RecordType::Frames),
        2 => Ok(RecordType::Text),
        other => Err(MebfError::UnknownRecordType(other)),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn need(&self, n: u64) -> Result<(), MebfError> {
        let available = self.bytes.len() as u64;
        let needed = self.pos as u64 + n;
        if needed > available {
            return Err(MebfError::Truncated { needed, available });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, MebfError> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32s(&mut self, n: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos += 4 * n;
        out
    }

    fn u32s(&mut self, n: usize) -> Vec<u32> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 4 * n;
        out
    }

    fn finish(&self) -> Result<(), MebfError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(MebfError::TrailingData(n as u64)),
        }
    }
}

fn expect(found: RecordType, expected: RecordType) -> Result<(), MebfError> {
    if found != expected {
        return Err(MebfError::WrongRecordType { expected, found });
    }
    Ok(())
}

fn payload_bytes(dims: &[u32]) -> Result<u64, MebfError> {
    dims.iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or_else(|| MebfError::DimensionOverflow(format!("{dims:?}")))
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<FrameEmbeddings, MebfError> {
    expect(header(bytes)?, RecordType::Frames)?;
    let mut cur = Cursor { bytes, pos: HEADER };
    let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
    let len = payload_bytes(&dims)?;
    cur.need(len)?;
    let [t, h, w, d] = dims.map(|v| v as usize);
    let tokens = cur.f32s(t * h * w * d);
    cur.finish()?;
    Ok(FrameEmbeddings::new(t, h, w, d, tokens)?)
}

pub fn decode_text(bytes: &[u8]) -> Result<TextEmbedding, MebfError> {
    expect(header(bytes)?, RecordType::Text)?;
    let mut cur = Cursor { bytes, pos: HEADER };
    let d = cur.u32()?;
    let m = cur.u32()?;
    let len = payload_bytes(&[d])?
        .checked_add(payload_bytes(&[m])?)
        .ok_or_else(|| MebfError::DimensionOverflow(format!("d={d}, M={m}")))?;
    cur.need(len)?;
    let vector = cur.f32s(d as usize);
    let ids = cur.u32s(m as usize);
    cur.finish()?;
    Ok(TextEmbedding::new(vector, ids)?)
}

fn dim_u32(v: usize, what: &str) -> Result<u32, MebfError> {
    u32::try_from(v).map_err(|_| MebfError::DimensionOverflow(format!("{what}={v}")))
}

fn start(record: RecordType, capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + capacity);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(record as u8);
    out
}

pub fn encode_embeddings(v: &FrameEmbeddings) -> Result<Vec<u8>, MebfError> {
    let dims = [
        dim_u32(v.frames(), "T")?,
        dim_u32(v.height(), "h")?,
        dim_u32(v.width(), "w")?,
        dim_u32(v.dim(), "d")?,
    ];
    let mut out = start(RecordType::Frames, 16 + 4 * v.tokens().len());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in v.tokens() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_text(t: &TextEmbedding) -> Result<Vec<u8>, MebfError> {
    let mut out = start(RecordType::Text, 8 + 4 * (t.dim() + t.prompt_ids().len()));
    out.extend_from_slice(&dim_u32(t.dim(), "d")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(t.prompt_ids().len(), "M")?.to_le_bytes());
    for &x in t.vector() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &id in t.prompt_ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<FrameEmbeddings, MebfError> {
    decode_embeddings(&std::fs::read(path)?)
}

pub fn write_embeddings(v: &FrameEmbeddings, path: impl AsRef<Path>) -> Result<(), MebfError> {
    std::fs::write(path, encode_embeddings(v)?)?;
    Ok(())
}

pub fn read_text(path: impl AsRef<Path>) -> Result<TextEmbedding, MebfError> {
    decode_text(&std::fs::read(path)?)
}

pub fn write_text(t: &TextEmbedding, path: impl AsRef<Path>) -> Result<(), MebfError> {
    std::fs::write(path, encode_text(t)?)?;
    Ok(())
}
