//! `PVEC` binary container.
//!
//! ```text
//! "PVEC" | version u16 | block count u32
//! per block: name len u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f64 LE * count
//! CRC32 (IEEE) over the concatenated payload bytes, u32
//! ```
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{Block, ParamVector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVEC";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4;
const TRAILER_LEN: usize = 4;

/// Exact encoded size of `v` in bytes.
pub fn serialized_len(v: &ParamVector) -> usize {
    HEADER_LEN
        + v.blocks()
            .iter()
            .map(|b| 2 + b.name().len() + 1 + 4 * b.shape().len() + 8 * b.len())
            .sum::<usize>()
        + TRAILER_LEN
}

pub fn serialize(v: &ParamVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(serialized_len(v));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(v.num_blocks()).map_err(|_| Error::Format("too many blocks".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for b in v.blocks() {
        let name = b.name().as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("block name too long: {}", b.name())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let ndim = u8::try_from(b.shape().len()).map_err(|_| Error::Format("too many dimensions".into()))?;
        out.push(ndim);
        for &d in b.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        for &x in b.values() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ParamVector> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("block count")? as usize;
    let mut crc = crc32fast::Hasher::new();
    let mut blocks = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("block {i}: name is not UTF-8")))?
            .to_owned();
        let ndim = cur.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("block `{name}`: size overflow")))?;
        let payload = cur.take(n, "payload")?;
        crc.update(payload);
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block::new(name, shape, values)?);
    }
    let stored = cur.u32("checksum")?;
    let computed = crc.finalize();
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    ParamVector::new(blocks).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_pvec(path: impl AsRef<Path>, v: &ParamVector) -> Result<()> {
    fs::write(path, serialize(v)?)?;
    Ok(())
}

pub fn read_pvec(path: impl AsRef<Path>) -> Result<ParamVector> {
    deserialize(&fs::read(path)?)
}
