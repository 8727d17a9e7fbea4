//! Little-endian binary tensor container.
//!
//! Layout: magic `DUNT`, format version `u32`, entry count `u32`; then per
//! entry: name length `u16`, UTF-8 name, dtype code `u8` (1=f32, 2=f64,
//! 3=u8, 4=i32), trainable flag `u8`, ndim `u8`, dims as `u32` each, and the
//! raw row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DUNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl EntryData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 1,
            EntryData::F64(_) => 2,
            EntryData::U8(_) => 3,
            EntryData::I32(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
            EntryData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub trainable: bool,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub entries: Vec<Entry>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for e in &self.entries {
            let n: usize = e.dims.iter().product();
            if n != e.data.len() {
                return Err(Error::Format(format!("entry `{}`: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
            }
            let name = e.name.as_bytes();
            let nlen = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
            w.write_all(&nlen.to_le_bytes())?;
            w.write_all(name)?;
            let ndim = u8::try_from(e.dims.len()).map_err(|_| Error::Format("too many dims".into()))?;
            w.write_all(&[e.data.dtype_code(), e.trainable as u8, ndim])?;
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::Format("dim exceeds u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            match &e.data {
                EntryData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                EntryData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                EntryData::U8(v) => w.write_all(v)?,
                EntryData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(r, &mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let mut hdr = [0u8; 3];
            read_exact(r, &mut hdr)?;
            let [dtype, trainable, ndim] = hdr;
            let dims = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = match dtype {
                1 => EntryData::F32(read_vec(r, n, f32::from_le_bytes)?),
                2 => EntryData::F64(read_vec(r, n, f64::from_le_bytes)?),
                3 => {
                    let mut v = vec![0u8; n];
                    read_exact(r, &mut v)?;
                    EntryData::U8(v)
                }
                4 => EntryData::I32(read_vec(r, n, i32::from_le_bytes)?),
                other => return Err(Error::Format(format!("entry `{name}`: unknown dtype code {other}"))),
            };
            if trainable > 1 {
                return Err(Error::Format(format!("entry `{name}`: trainable flag {trainable}")));
            }
            entries.push(Entry { name, trainable: trainable == 1, dims, data });
        }
        Ok(TensorFile { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec<T, const N: usize>(r: &mut impl Read, n: usize, conv: fn([u8; N]) -> T) -> Result<Vec<T>> {
    let mut raw = vec![0u8; n * N];
    read_exact(r, &mut raw)?;
    Ok(raw.chunks_exact(N).map(|c| conv(c.try_into().unwrap())).collect())
}
