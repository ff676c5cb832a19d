//! The `JDCK` record container used for checkpoints, dataset caches and
//! sample dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"JDCK"  u32 version
//! repeated until EOF:
//!   u32 name_len, name (UTF-8), u8 dtype, u32 rank, rank x u64 extents,
//!   product(extents) raw values
//! ```
//!
//! dtype tags: 0 = f64, 1 = f32, 2 = u64, 3 = u8.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JDCK";
pub const FORMAT_VERSION: u32 = 1;

/// Storage precision for float tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::F32(_) => 1,
            Payload::U64(_) => 2,
            Payload::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        ["f64", "f32", "u64", "u8"][self.tag() as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate record `{name}`")));
        }
        if shape.iter().product::<usize>() != payload.len() {
            return Err(Error::shape("container", &shape, &[payload.len()]));
        }
        self.records.push(Record { name, shape, payload });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor, precision: Precision) -> Result<()> {
        let payload = match precision {
            Precision::F64 => Payload::F64(t.data().to_vec()),
            Precision::F32 => Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        };
        self.push(name, t.shape().to_vec(), payload)
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, values: Vec<u64>) -> Result<()> {
        self.push(name, vec![values.len()], Payload::U64(values))
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, shape: Vec<usize>, bytes: Vec<u8>) -> Result<()> {
        self.push(name, shape, Payload::U8(bytes))
    }

    pub fn push_str(&mut self, name: impl Into<String>, s: &str) -> Result<()> {
        let b = s.as_bytes().to_vec();
        self.push(name, vec![b.len()], Payload::U8(b))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("container has no record `{name}`")))
    }

    /// A float record as a 64-bit tensor (f32 records are widened).
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.require(name)?;
        let data = match &r.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            other => {
                return Err(Error::Data(format!(
                    "record `{name}` has dtype {}, expected a float",
                    other.dtype_name()
                )))
            }
        };
        Tensor::new(r.shape.clone(), data)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.payload {
            Payload::U64(v) => Ok(v),
            other => Err(Error::Data(format!("record `{name}` has dtype {}, expected u64", other.dtype_name()))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let r = self.require(name)?;
        match &r.payload {
            Payload::U8(v) => Ok((&r.shape, v)),
            other => Err(Error::Data(format!("record `{name}` has dtype {}, expected u8", other.dtype_name()))),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        let (_, b) = self.bytes(name)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Data(format!("record `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, expected JDCK"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported container version {version}")));
        }
        let mut c = Container::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?
                .to_string();
            let tag = cur.take(1)?[0];
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = match tag {
                0 => Payload::F64(cur.take(n * 8)?.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => Payload::F32(cur.take(n * 4)?.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                2 => Payload::U64(cur.take(n * 8)?.chunks(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
                3 => Payload::U8(cur.take(n)?.to_vec()),
                t => return Err(Error::format(path, format!("record `{name}`: unknown dtype tag {t}"))),
            };
            c.push(name, shape, payload)?;
        }
        Ok(c)
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
