//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TRVC" | version: u32 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | rank: u32 | dims: u64 × rank
//!            | dtype: u8 | payload (product(dims) elements, contiguous)
//! CRC32 of every preceding byte: u32
//! ```
//!
//! A rank-0 entry holds one element.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TRVC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U64 = 2,
    U8 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F64),
            2 => Ok(DType::U64),
            3 => Ok(DType::U8),
            _ => Err(Error::Checkpoint(format!("unknown dtype code {code}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn u64(name: impl Into<String>, v: u64) -> Self {
        Entry {
            name: name.into(),
            dims: Vec::new(),
            payload: Payload::U64(vec![v]),
        }
    }

    pub fn bytes(name: impl Into<String>, b: &[u8]) -> Self {
        Entry {
            name: name.into(),
            dims: vec![b.len()],
            payload: Payload::U8(b.to_vec()),
        }
    }

    fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    /// The f64 entry `name` as a tensor of `expected` shape.
    pub fn tensor(&self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let e = self.require(name)?;
        if e.dims != expected {
            return Err(Error::EntryShape {
                name: name.into(),
                expected: expected.to_vec(),
                found: e.dims.clone(),
            });
        }
        match &e.payload {
            Payload::F64(v) => Tensor::new(e.dims.clone(), v.clone()),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` has dtype {:?}, expected F64",
                other.dtype()
            ))),
        }
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        match &self.require(name)?.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Checkpoint(format!(
                "entry `{name}` is not a u64 scalar"
            ))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!(
                "entry `{name}` is not a byte string"
            ))),
        }
    }

    fn check_entries(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate entry `{}`", e.name)));
            }
            if e.numel() != e.payload.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: dims {:?} hold {} elements, payload has {}",
                    e.name,
                    e.dims,
                    e.numel(),
                    e.payload.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_entries()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.entries.len(), "entry count")?;
        for e in &self.entries {
            put_u32(&mut out, e.name.len(), "name length")?;
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, e.dims.len(), "rank")?;
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.payload.dtype() as u8);
            match &e.payload {
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::Checkpoint(format!("truncated: {} bytes", buf.len())));
        }
        if buf[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a TRVC checkpoint".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| {
                    let d = r.u64()?;
                    usize::try_from(d)
                        .map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let dtype = DType::from_code(r.take(1)?[0])?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("entry `{name}`: element count overflows"))
                })?;
            let bytes_len = numel.checked_mul(dtype.size()).ok_or_else(|| {
                Error::Checkpoint(format!("entry `{name}`: payload size overflows"))
            })?;
            let raw = r.take(bytes_len)?;
            let payload = match dtype {
                DType::F64 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::U64 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::U8 => Payload::U8(raw.to_vec()),
            };
            entries.push(Entry {
                name,
                dims,
                payload,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                body.len() - r.pos
            )));
        }
        let ckpt = Checkpoint { entries };
        ckpt.check_entries()?;
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
