//! Versioned little-endian checkpoint container.
//!
//! Layout: the magic `VIPCKPT1`, `u32` version, `u32` record count, then per
//! record: `u32` name length, name bytes, `u8` dtype code, `u8` rank, one
//! `u64` per dimension, and the raw little-endian values. Records keep their
//! order, so loading and re-saving reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"VIPCKPT1";
pub const VERSION: u32 = 1;

const CODE_F32: u8 = 0;
const CODE_F64: u8 = 1;
const CODE_U8: u8 = 2;
const CODE_U64: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            Self::F32(_) => CODE_F32,
            Self::F64(_) => CODE_F64,
            Self::U8(_) => CODE_U8,
            Self::U64(_) => CODE_U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn text(name: impl Into<String>, s: &str) -> Self {
        Self {
            name: name.into(),
            shape: vec![s.len()],
            data: RecordData::U8(s.as_bytes().to_vec()),
        }
    }

    pub fn integers(name: impl Into<String>, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: RecordData::U64(values.to_vec()),
        }
    }

    /// Floating point payload as a tensor of the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match &self.data {
            RecordData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            RecordData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            _ => return Err(Error::Schema(format!("record `{}` is not floating point", self.name))),
        };
        Tensor::new(&self.shape, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub records: Vec<Record>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            version: VERSION,
            records: Vec::new(),
        }
    }

    /// Appends a record; names must be unique.
    pub fn push(&mut self, record: Record) -> Result<()> {
        if self.get(&record.name).is_some() {
            return Err(Error::Schema(format!("duplicate record `{}`", record.name)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint has no `{name}` record")))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.require(name)?.data {
            RecordData::U8(b) => {
                String::from_utf8(b.clone()).map_err(|e| Error::Schema(format!("record `{name}`: {e}")))
            }
            _ => Err(Error::Schema(format!("record `{name}` is not text"))),
        }
    }

    pub fn integers(&self, name: &str) -> Result<Vec<u64>> {
        match &self.require(name)?.data {
            RecordData::U64(v) => Ok(v.clone()),
            _ => Err(Error::Schema(format!("record `{name}` is not an integer list"))),
        }
    }

    pub fn integer(&self, name: &str) -> Result<u64> {
        match self.integers(name)?[..] {
            [v] => Ok(v),
            _ => Err(Error::Schema(format!("record `{name}` is not a single integer"))),
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.require(name)?.to_tensor()
    }

    /// Writes every store entry as `{prefix}{name}`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for e in store.entries() {
            self.push(Record::tensor(format!("{prefix}{}", e.name), &e.value))?;
        }
        Ok(())
    }

    /// Fills every store entry from `{prefix}{name}`, checking shapes, and
    /// rejects records under `prefix` that the store does not know.
    pub fn fill_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.entry(id).name);
            let t = self.tensor::<T>(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Schema(format!(
                    "record `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t)?;
        }
        if let Some(extra) = self
            .records
            .iter()
            .filter_map(|r| r.name.strip_prefix(prefix))
            .find(|n| store.find(n).is_none())
        {
            return Err(Error::Schema(format!("record `{prefix}{extra}` matches no model parameter")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.code());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U8(v) => out.extend_from_slice(v),
                RecordData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    /// Parses a checkpoint; `path` is used in error messages only.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.error(0, "bad magic; not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(8, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint {
            version,
            records: Vec::with_capacity(count as usize),
        };
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error(start as u64, "record name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.error(start as u64, "dimension too large"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error(start as u64, "element count overflows"))?;
            let data = match code {
                CODE_F32 => RecordData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| r.error(start as u64, "record too large"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                CODE_F64 => RecordData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| r.error(start as u64, "record too large"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                CODE_U8 => RecordData::U8(r.take(n)?.to_vec()),
                CODE_U64 => RecordData::U64(
                    r.take(n.checked_mul(8).ok_or_else(|| r.error(start as u64, "record too large"))?)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(r.error(start as u64, format!("unknown dtype code {other} in `{name}`"))),
            };
            debug_assert_eq!(data.len(), n);
            ckpt.push(Record { name, shape, data })
                .map_err(|e| r.error(start as u64, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after the last record"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn error(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error(self.pos as u64, format!("unexpected end of file reading {n} bytes")))?;
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
