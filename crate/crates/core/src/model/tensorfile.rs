//! Versioned named-tensor container.
//!
//! ```text
//! magic "MLMTENSR" | version u32 | count u32 | meta u64
//! repeated: name_len u32 | name utf-8 | ndim u32 | dims u64 x ndim | data f32 x prod(dims)
//! ```
//! All little-endian. `meta` is a free counter (the optimizer stores its step there).

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"MLMTENSR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write(path: &Path, tensors: &[Tensor], meta: u64) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 16).sum();
    let mut buf = Vec::with_capacity(24 + total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta.to_le_bytes());
    for t in tensors {
        assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "tensor {} shape", t.name);
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).ctx(|| format!("writing {}", path.display()))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, self.bytes.len() as u64, "truncated tensor file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read all tensors and the meta counter.
pub fn read(path: &Path) -> Result<(Vec<Tensor>, u64)> {
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, 8, format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let meta = c.u64()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, c.pos as u64, "tensor name is not utf-8"))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(Tensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, c.pos as u64, "trailing bytes after last tensor"));
    }
    Ok((out, meta))
}
