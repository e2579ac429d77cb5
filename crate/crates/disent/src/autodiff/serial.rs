//! TSR1 binary tensor format.
//!
//! Layout: magic "TSR1", rank as u32 little-endian, one u32 extent per
//! dimension, then the raw f64 data little-endian, row-major.

use std::io::{Read, Write};

use super::{numel_of, Tensor};

pub const TSR1_MAGIC: &[u8; 4] = b"TSR1";

/// Malformed or truncated binary input, with the byte offset (relative to
/// the start of the stream handed to the reader) where parsing failed.
#[derive(Debug, Clone, thiserror::Error)]
#[error("format error at byte {offset}: {msg}")]
pub struct FormatError {
    pub offset: u64,
    pub msg: String,
}

pub fn write_tsr1<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TSR1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Byte length of a tensor's TSR1 encoding.
pub fn tsr1_len(t: &Tensor) -> u64 {
    4 + 4 + 4 * t.rank() as u64 + 8 * t.numel() as u64
}

/// Read one TSR1 record. `base` is the offset of the reader's current
/// position within the enclosing file, used only for error reporting.
pub fn read_tsr1_at<R: Read>(r: &mut R, base: u64) -> Result<(Tensor, u64), FormatError> {
    let mut pos = base;
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, &mut pos)?;
    if &magic != TSR1_MAGIC {
        return Err(FormatError {
            offset: base,
            msg: format!("bad magic {:?}, expected \"TSR1\"", magic),
        });
    }
    let rank = read_u32(r, &mut pos)? as usize;
    if rank > 8 {
        return Err(FormatError {
            offset: pos - 4,
            msg: format!("implausible rank {}", rank),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, &mut pos)? as usize);
    }
    let n = numel_of(&shape);
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut buf, &mut pos)?;
        data.push(f64::from_le_bytes(buf));
    }
    let t = Tensor::from_vec(data, &shape).map_err(|e| FormatError {
        offset: base,
        msg: e.to_string(),
    })?;
    Ok((t, pos - base))
}

pub fn read_tsr1<R: Read>(r: &mut R) -> Result<Tensor, FormatError> {
    read_tsr1_at(r, 0).map(|(t, _)| t)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], pos: &mut u64) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| FormatError {
        offset: *pos,
        msg: format!("truncated: {}", e),
    })?;
    *pos += buf.len() as u64;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, pos: &mut u64) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, pos)?;
    Ok(u32::from_le_bytes(buf))
}
