//! Versioned named-tensor archive.
//!
//! Layout (little endian): magic `CHGCKPT\0`, `u32` version, `u64` length plus
//! the JSON config blob, `u64` entry count, then per entry: `u32` name length,
//! name bytes, `u8` dtype code, `u8` rank, `u64` per extent, raw data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"CHGCKPT\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub config: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new(config: serde_json::Value) -> Self {
        Archive { config, entries: Vec::new() }
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => EntryData::F64(t.to_f64_vec()),
        };
        self.entries.push(ArchiveEntry { name: name.into(), shape: t.shape().to_vec(), data });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        let shape = vec![values.len()];
        self.entries.push(ArchiveEntry { name: name.into(), shape, data: EntryData::U64(values) });
    }

    pub fn entry(&self, name: &str) -> Result<&ArchiveEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))
    }

    /// Reads a tensor entry, converting from the stored precision.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let [rows, cols] = e.shape[..] else {
            return Err(Error::Checkpoint(format!("entry '{name}' is not 2-D")));
        };
        let data: Vec<T> = match &e.data {
            EntryData::F32(v) => v.iter().map(|&x| T::of(f64::from(x))).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            EntryData::U64(_) => return Err(Error::Checkpoint(format!("entry '{name}' is not a real tensor"))),
        };
        Ok(Tensor::from_vec(rows, cols, data))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.entry(name)?.data {
            EntryData::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("entry '{name}' is not an integer vector"))),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(ARCHIVE_MAGIC)?;
        out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        let blob = serde_json::to_vec(&self.config)?;
        out.write_all(&(blob.len() as u64).to_le_bytes())?;
        out.write_all(&blob)?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for e in &self.entries {
            buf.clear();
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(e.data.dtype().code());
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                EntryData::U64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated archive".into()))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let blob_len = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let blob = read_vec(&mut input, blob_len)?;
        let config = serde_json::from_slice(&blob)?;
        let count = u64::from_le_bytes(read_array(&mut input)?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
            let name = String::from_utf8(read_vec(&mut input, name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let [code, rank] = read_array::<2, _>(&mut input)?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("bad dtype code {code}")))?;
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_array(&mut input).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = read_vec(&mut input, n * dtype.size())?;
            let data = match dtype {
                DType::F32 => EntryData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => EntryData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::U64 => EntryData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            debug_assert_eq!(data.len(), n);
            entries.push(ArchiveEntry { name, shape, data });
        }
        Ok(Archive { config, entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(crate::error::open_file(path)?))
    }
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated archive".into()))?;
    Ok(b)
}

fn read_vec<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    input.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated archive".into()))?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new(serde_json::json!({"layers": 2, "seed": 7}));
        a.push_tensor("w", &Tensor::<f64>::from_f64(2, 2, &[0.1, -1e-300, f64::MIN_POSITIVE, 3.0]));
        a.push_tensor("b", &Tensor::<f32>::from_f64(1, 3, &[0.1, 0.2, -0.3]));
        a.push_u64("adam.t", vec![42]);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let back = Archive::read(buf.as_slice()).unwrap();
        assert_eq!(back, a);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, buf);
        assert_eq!(back.tensor::<f64>("w").unwrap().data()[1], -1e-300);
        assert_eq!(back.u64s("adam.t").unwrap(), &[42]);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        assert!(Archive::read(&b"CHGCKPT\0\x09\0\0\0"[..]).is_err());
        assert!(Archive::read(&b"garbage!"[..]).is_err());
        let mut buf = Vec::new();
        Archive::new(serde_json::json!({})).write(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(Archive::read(buf.as_slice()).is_err());
    }
}
