//! Little-endian helpers shared by the binary artifact formats.
//!
//! Every blob starts with an 8-byte magic and a `u32` version, followed by
//! format-specific header fields. All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::config::Fingerprint;
use crate::error::{Error, Result};

pub const FLOW_MAGIC: &[u8; 8] = b"SFLOWBIN";
pub const GRAPH_MAGIC: &[u8; 8] = b"SFGRAPH\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, FORMAT_VERSION)
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)
        .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
    if &found != magic {
        return Err(Error::Format(format!("{what}: bad magic bytes")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub(crate) fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_i64<W: Write>(w: &mut W, v: i64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vs: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    write_u64(w, bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn write_fingerprint<W: Write>(w: &mut W, fp: &Fingerprint) -> Result<()> {
    w.write_all(&fp.0)?;
    Ok(())
}

fn read_array<R: Read, const K: usize>(r: &mut R) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated blob: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(read_array::<_, 1>(r)?[0])
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    Ok(i64::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Reads a length-prefixed byte string, refusing lengths above `limit`.
pub(crate) fn read_bytes<R: Read>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    if len > limit {
        return Err(Error::Format(format!("field length {len} exceeds {limit}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated blob: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_fingerprint<R: Read>(r: &mut R) -> Result<Fingerprint> {
    Ok(Fingerprint(read_array(r)?))
}

pub(crate) fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("{what}: trailing bytes after payload"))),
    }
}
