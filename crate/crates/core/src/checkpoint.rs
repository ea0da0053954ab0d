//! Named-tensor checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "BGCT" | version u32 | count u32
//! count x (name_len u32 | name | dtype u8 | rank u32 | extents u64 x rank | offset u64)
//! payloads (offset is absolute, payloads are contiguous in table order)
//! crc32 u32 over every preceding byte
//! ```

use std::collections::HashMap;
use std::path::Path;

use bgcut_tensor::{DType, RunningStats, Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::nn::{Module, Slot, SlotMut};

pub const MAGIC: &[u8; 4] = b"BGCT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 12;
pub const TRAILER_BYTES: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}`: stored {stored}, expected {expected}")]
    Mismatch {
        name: String,
        stored: String,
        expected: String,
    },
    #[error("metadata `{name}`: {source}")]
    Meta {
        name: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::BadMagic => 2,
            CheckpointError::UnsupportedVersion { .. } => 3,
            CheckpointError::Truncated => 4,
            CheckpointError::ChecksumMismatch { .. } => 5,
            CheckpointError::BadDType(_) => 6,
            CheckpointError::Missing(_) => 7,
            CheckpointError::Mismatch { .. } => 8,
            CheckpointError::Meta { .. } => 9,
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U8(_) => 2,
            Payload::U32(_) => 3,
        }
    }

    fn elem_bytes(code: u8) -> Result<usize> {
        match code {
            0 => Ok(4),
            1 => Ok(8),
            2 => Ok(1),
            3 => Ok(4),
            c => Err(CheckpointError::BadDType(c)),
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * Self::elem_bytes(self.code()).expect("known code")
    }

    fn kind(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U8(_) => "u8",
            Payload::U32(_) => "u32",
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(code: u8, bytes: &[u8]) -> Result<Self> {
        Ok(match code {
            0 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Payload::U8(bytes.to_vec()),
            3 => Payload::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            c => return Err(CheckpointError::BadDType(c)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
    index: HashMap<String, usize>,
}

/// Byte accounting of a serialized archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub header: usize,
    pub table: usize,
    pub payload: usize,
    pub trailer: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.header + self.table + self.payload + self.trailer
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = entry,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, entry));
            }
        }
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.insert(
            name,
            Entry {
                shape: t.shape().to_vec(),
                payload,
            },
        );
    }

    /// Reads a float tensor, converting precision if the stored dtype differs.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.require(name)?;
        let data: Vec<T> = match &e.payload {
            Payload::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            other => {
                return Err(CheckpointError::Mismatch {
                    name: name.to_string(),
                    stored: other.kind().into(),
                    expected: "float".into(),
                })
            }
        };
        Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Mismatch {
            name: name.to_string(),
            stored: format!("{:?}", e.shape),
            expected: err.to_string(),
        })
    }

    pub fn put_u32s(&mut self, name: impl Into<String>, v: &[u32]) {
        self.insert(
            name,
            Entry {
                shape: vec![v.len()],
                payload: Payload::U32(v.to_vec()),
            },
        );
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        match &self.require(name)?.payload {
            Payload::U32(v) => Ok(v.clone()),
            other => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                stored: other.kind().into(),
                expected: "u32".into(),
            }),
        }
    }

    /// Stores a value as JSON text in a u8 tensor.
    pub fn put_json<S: Serialize>(&mut self, name: impl Into<String>, value: &S) {
        let name = name.into();
        let bytes = serde_json::to_vec(value).expect("serializable metadata");
        self.insert(
            name,
            Entry {
                shape: vec![bytes.len()],
                payload: Payload::U8(bytes),
            },
        );
    }

    pub fn json<D: DeserializeOwned>(&self, name: &str) -> Result<D> {
        match &self.require(name)?.payload {
            Payload::U8(v) => serde_json::from_slice(v).map_err(|source| CheckpointError::Meta {
                name: name.to_string(),
                source,
            }),
            other => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                stored: other.kind().into(),
                expected: "u8".into(),
            }),
        }
    }

    /// Writes every parameter and running statistic of `m` under `prefix`.
    pub fn put_module<T: Scalar, M: Module<T> + ?Sized>(&mut self, prefix: &str, m: &M) {
        m.visit(prefix, &mut |name, slot| match slot {
            Slot::Param(p) => self.put_tensor(name, p.value()),
            Slot::Stats(s) => {
                self.put_tensor(format!("{name}.mean"), &s.mean);
                self.put_tensor(format!("{name}.var"), &s.var);
            }
        });
    }

    /// Loads into an already-shaped module; every shape must match.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(&self, prefix: &str, m: &mut M) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let r = (|| -> Result<()> {
                match slot {
                    SlotMut::Param(p) => {
                        let t = self.shaped(&name, p.value().shape())?;
                        p.set(t);
                    }
                    SlotMut::Stats(s) => {
                        let RunningStats { mean, var, .. } = s;
                        *mean = self.shaped(&format!("{name}.mean"), mean.shape())?;
                        *var = self.shaped(&format!("{name}.var"), var.shape())?;
                    }
                }
                Ok(())
            })();
            err = r.err();
        });
        err.map_or(Ok(()), Err)
    }

    fn shaped<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.tensor::<T>(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::Mismatch {
                name: name.to_string(),
                stored: format!("{:?}", t.shape()),
                expected: format!("{shape:?}"),
            });
        }
        Ok(t)
    }

    pub fn layout(&self) -> Layout {
        let table = self
            .entries
            .iter()
            .map(|(n, e)| 4 + n.len() + 1 + 4 + 8 * e.shape.len() + 8)
            .sum();
        let payload = self.entries.iter().map(|(_, e)| e.payload.byte_len()).sum();
        Layout {
            header: HEADER_BYTES,
            table,
            payload,
            trailer: TRAILER_BYTES,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.total());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = (layout.header + layout.table) as u64;
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.payload.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.payload.byte_len() as u64;
        }
        for (_, e) in &self.entries {
            e.payload.write(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let code = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, code, shape, offset));
        }
        let body_end = bytes.len().checked_sub(TRAILER_BYTES).ok_or(CheckpointError::Truncated)?;
        let mut spans = Vec::with_capacity(table.len());
        for (_, code, shape, offset) in &table {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(Payload::elem_bytes(*code).ok()?))
                .ok_or(CheckpointError::Truncated)?;
            Payload::elem_bytes(*code)?;
            let end = offset.checked_add(n).ok_or(CheckpointError::Truncated)?;
            if *offset < r.pos || end > body_end {
                return Err(CheckpointError::Truncated);
            }
            spans.push((*offset, end));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let mut archive = Archive::new();
        for ((name, code, shape, _), (start, end)) in table.into_iter().zip(spans) {
            let payload = Payload::read(code, &bytes[start..end])?;
            archive.insert(name, Entry { shape, payload });
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.put_tensor("w", &Tensor::new([2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap());
        a.put_tensor("d", &Tensor::new([1], vec![std::f64::consts::PI]).unwrap());
        a.put_u32s("mask", &[0, 2, 5]);
        a.put_json("meta", &vec!["a", "b"]);
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.json::<Vec<String>>("meta").unwrap(), ["a", "b"]);
    }

    #[test]
    fn size_matches_layout() {
        let a = sample();
        let l = a.layout();
        // w: 4+1+1+4+16+8, d: 4+1+1+4+8+8, mask: 4+4+1+4+8+8, meta: 4+4+1+4+8+8
        assert_eq!(l.table, 34 + 26 + 29 + 29);
        assert_eq!(l.payload, 24 + 8 + 12 + 9);
        assert_eq!(a.to_bytes().len(), l.total());
    }

    #[test]
    fn distinct_failures() {
        let good = sample().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            Archive::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));
        assert!(matches!(
            Archive::from_bytes(&good[..good.len() - 20]),
            Err(CheckpointError::Truncated)
        ));
        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(
            Archive::from_bytes(&bad),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }
}
