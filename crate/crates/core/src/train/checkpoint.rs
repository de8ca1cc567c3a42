//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `RAKT`, u32 version, u32 tensor count, then
//! per tensor: u32 name length, name bytes, u32 rank, u64 dims, u32 dtype
//! tag (0 = f64, 1 = u64, 2 = u8), raw data. A CRC32 of everything before
//! it closes the file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RAKT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u32 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::U64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data: TensorData::U64(data),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Self {
            name: name.into(),
            shape: vec![text.len()],
            data: TensorData::U8(text.as_bytes().to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::F64(v)) => Ok(v),
            Some(_) => Err(Error::Format(format!("`{name}` is not an f64 tensor"))),
            None => Err(Error::Format(format!("checkpoint has no `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::U64(v)) => Ok(v),
            Some(_) => Err(Error::Format(format!("`{name}` is not a u64 tensor"))),
            None => Err(Error::Format(format!("checkpoint has no `{name}`"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::U8(v)) => {
                String::from_utf8(v.clone()).map_err(|_| Error::Format(format!("`{name}` is not UTF-8")))
            }
            Some(_) => Err(Error::Format(format!("`{name}` is not a byte tensor"))),
            None => Err(Error::Format(format!("checkpoint has no `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::ShapeMismatch {
                    expected: t.shape.clone(),
                    found: vec![t.data.len()],
                });
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data.tag().to_le_bytes());
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let data = match r.u32()? {
                0 => TensorData::F64(
                    r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                        .chunks(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => TensorData::U64(
                    r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                        .chunks(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => TensorData::U8(r.take(len)?.to_vec()),
                tag => return Err(Error::Format(format!("unknown dtype tag {tag} for `{name}`"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
