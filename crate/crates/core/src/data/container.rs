//! The `AVFT` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVFT" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | count u64
//! per entry: name_len u32 | name (UTF-8) | ndim u32 | dims u64 × ndim | payload
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"AVFT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_byte(b: u8) -> Option<Dtype> {
        match b {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dtype: Dtype,
    pub entries: IndexMap<String, Tensor>,
}

impl Container {
    pub fn new(dtype: Dtype) -> Self {
        Container {
            dtype,
            entries: IndexMap::new(),
        }
    }

    /// Looks up an entry, reporting the container path on failure.
    pub fn get(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing entry `{name}`"),
        })
    }
}

/// Serializes `entries`; `f32` output rounds each value.
pub fn encode<'a, I>(entries: I, dtype: Dtype) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name) {
            return Err(Error::invalid(format!("duplicate container entry `{name}`")));
        }
        let name_len = u32::try_from(name.len()).map_err(|_| Error::invalid("entry name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: format!("{} (at byte {})", detail.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container image; `path` is used only in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let dtype_byte = r.take(1, "dtype")?[0];
    let dtype = Dtype::from_byte(dtype_byte).ok_or_else(|| r.err(format!("unknown dtype {dtype_byte}")))?;
    let count = r.u64("entry count")?;
    let mut out = Container::new(dtype);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("entry name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 {
            return Err(r.err(format!("entry `{name}` has no dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim.min(16));
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64("dims")?).map_err(|_| r.err("dimension overflows"))?;
            if d == 0 {
                return Err(r.err(format!("entry `{name}` has a zero dimension")));
            }
            numel = numel.checked_mul(d).ok_or_else(|| r.err("element count overflows"))?;
            shape.push(d);
        }
        let bytes_needed = numel
            .checked_mul(dtype.width())
            .ok_or_else(|| r.err("payload size overflows"))?;
        let payload = r.take(bytes_needed, "payload")?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
        if out.entries.insert(name.clone(), tensor).is_some() {
            return Err(r.err(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_container<'a, I>(path: &Path, entries: I, dtype: Dtype) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let bytes = encode(entries, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
