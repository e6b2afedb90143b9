//! `TRPT` tensor-pack: a flat little-endian container of named tensors.
//!
//! ```text
//! "TRPT" | version: u32 | count: u32 | entry*
//! entry = name_len: u32 | name: utf-8 | dtype: u8 | rank: u8 | dims: u64*rank | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = i64.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TRPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum PackData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl PackData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            PackData::F32(_) => 0,
            PackData::F64(_) => 1,
            PackData::U8(_) => 2,
            PackData::I64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PackData::F32(v) => v.len(),
            PackData::F64(v) => v.len(),
            PackData::U8(v) => v.len(),
            PackData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(code: u8) -> Result<usize> {
        match code {
            0 => Ok(4),
            1 | 3 => Ok(8),
            2 => Ok(1),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            PackData::F32(v) => f32::to_le_bytes_vec(v),
            PackData::F64(v) => f64::to_le_bytes_vec(v),
            PackData::U8(v) => v.clone(),
            PackData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(code: u8, bytes: &[u8]) -> Result<Self> {
        Ok(match code {
            0 => PackData::F32(f32::from_le_bytes_slice(bytes)),
            1 => PackData::F64(f64::from_le_bytes_slice(bytes)),
            2 => PackData::U8(bytes.to_vec()),
            3 => PackData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: PackData,
}

/// An ordered set of uniquely named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorPack {
    entries: Vec<PackEntry>,
}

impl TensorPack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: PackData) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Input(format!("duplicate pack entry `{name}`")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "pack insert",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        self.entries.push(PackEntry {
            name: name.to_string(),
            dims,
            data,
        });
        Ok(())
    }

    pub fn insert_tensor<F: Element>(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        let data = if F::DTYPE_CODE == 0 {
            PackData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            PackData::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        self.insert(name, t.shape().to_vec(), data)
    }

    pub fn insert_scalar_i64(&mut self, name: &str, v: i64) -> Result<()> {
        self.insert(name, vec![], PackData::I64(vec![v]))
    }

    pub fn get(&self, name: &str) -> Option<&PackEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&PackEntry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    /// Reads a float entry as `Tensor<F>`, converting between f32 and f64.
    pub fn tensor<F: Element>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self.require(name)?;
        let data = match &e.data {
            PackData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            PackData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            _ => {
                return Err(Error::Format(format!(
                    "entry `{name}` is not floating point"
                )))
            }
        };
        Tensor::new(e.dims.clone(), data)
    }

    pub fn f64_values(&self, name: &str) -> Result<Vec<f64>> {
        match &self.require(name)?.data {
            PackData::F64(v) => Ok(v.clone()),
            PackData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::Format(format!(
                "entry `{name}` is not floating point"
            ))),
        }
    }

    pub fn u8_values(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.data {
            PackData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not u8"))),
        }
    }

    pub fn i64_values(&self, name: &str) -> Result<&[i64]> {
        match &self.require(name)?.data {
            PackData::I64(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not i64"))),
        }
    }

    pub fn scalar_i64(&self, name: &str) -> Result<i64> {
        match self.i64_values(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Format(format!("entry `{name}` is not a scalar"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.data.dtype_code(), e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&e.data.to_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let mut pack = TensorPack::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?
                .to_string();
            let head = cur.take(2)?;
            let (code, rank) = (head[0], head[1] as usize);
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{name}` too large")))?;
            let nbytes = numel
                .checked_mul(PackData::elem_size(code)?)
                .ok_or_else(|| Error::Format(format!("entry `{name}` too large")))?;
            let data = PackData::from_bytes(code, cur.take(nbytes)?)?;
            pack.insert(&name, dims, data)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(pack)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
