//! The `SETF` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"SETF"
//! version   u16            (currently 1)
//! count     u32
//! entries   count × {
//!     name_len  u16, name (UTF-8)
//!     dtype     u8         0 = f64, 1 = u32
//!     rank      u8
//!     extents   rank × u64
//!     payload   product(extents) × dtype size, little-endian
//! }
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, LabelMap, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"SETF";
pub const VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F64(Tensor),
    U32(LabelMap),
}

impl EntryData {
    pub fn shape(&self) -> &[usize] {
        match self {
            EntryData::F64(t) => t.shape(),
            EntryData::U32(m) => m.shape(),
        }
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
    pub fn bit_eq(&self, other: &EntryData) -> bool {
        match (self, other) {
            (EntryData::F64(a), EntryData::F64(b)) => {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (EntryData::U32(a), EntryData::U32(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub data: EntryData,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, data: EntryData) -> Self {
        Self {
            name: name.into(),
            data,
        }
    }
}

pub fn encode(entries: &[TensorEntry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(entries.len()).map_err(|_| Error::Data("too many tensor entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Data(format!("duplicate tensor name '{}'", e.name)));
        }
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Data(format!("tensor name too long: {}", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.data.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Data(format!("tensor {} has too many axes", e.name)))?;
        out.push(match e.data {
            EntryData::F64(_) => DTYPE_F64,
            EntryData::U32(_) => DTYPE_U32,
        });
        out.push(rank);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            EntryData::F64(t) => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            EntryData::U32(m) => m
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str, entry: Option<&str>) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            let context = entry.map_or(String::new(), |e| format!(" of entry '{e}'"));
            return Err(Error::Corrupt {
                offset: self.bytes.len(),
                reason: format!(
                    "truncated while reading {what}{context} ({n} bytes needed at byte {})",
                    self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str, entry: Option<&str>) -> Result<[u8; N]> {
        Ok(self
            .take(N, what, entry)?
            .try_into()
            .expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic", None)? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "missing SETF magic".into(),
        });
    }
    let version = u16::from_le_bytes(r.array("version", None)?);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = u32::from_le_bytes(r.array("entry count", None)?);
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for i in 0..count {
        let start = r.pos;
        let name_len = u16::from_le_bytes(r.array("name length", None)?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name", None)?)
            .map_err(|_| Error::Corrupt {
                offset: start + 2,
                reason: format!("entry {i} name is not valid UTF-8"),
            })?
            .to_string();
        let ctx = Some(name.as_str());
        let dtype_at = r.pos;
        let [dtype] = r.array("dtype", ctx)?;
        let [rank] = r.array("rank", ctx)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array("extent", ctx)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Corrupt {
                offset: r.pos - 8,
                reason: format!("extent {d} of entry '{name}' does not fit in memory"),
            })?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt {
                offset: r.pos,
                reason: format!("entry '{name}' is impossibly large"),
            })?;
        let corrupt = |reason: String| Error::Corrupt {
            offset: dtype_at,
            reason,
        };
        let data = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel * 8, "payload", ctx)?;
                let values = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                EntryData::F64(
                    Tensor::new(shape, values)
                        .map_err(|e| corrupt(format!("entry '{name}': {e}")))?,
                )
            }
            DTYPE_U32 => {
                let raw = r.take(numel * 4, "payload", ctx)?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                EntryData::U32(
                    LabelMap::new(shape, values)
                        .map_err(|e| corrupt(format!("entry '{name}': {e}")))?,
                )
            }
            other => return Err(corrupt(format!("entry '{name}' has unknown dtype {other}"))),
        };
        if !seen.insert(name.clone()) {
            return Err(Error::Corrupt {
                offset: start,
                reason: format!("duplicate entry name '{name}'"),
            });
        }
        entries.push(TensorEntry { name, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

/// Writes atomically: the file is written under a temporary name and renamed.
pub fn write_tensor_file(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    write_atomic(path, &bytes)
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<TensorEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
