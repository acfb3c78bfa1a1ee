//! Named-tensor archive used for every on-disk artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"PEFTXFR1"
//! header_len   u64       H
//! header       H bytes   UTF-8 JSON, compact, keys sorted:
//!                        {"meta":{k:v,..},"tensors":{name:{"dtype","nbytes","offset","shape"},..}}
//! data         raw IEEE-754 payloads, concatenated in name order, no padding
//! ```
//!
//! Offsets are relative to the start of the data section. Because both maps are
//! ordered, the same container always serializes to the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"PEFTXFR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype {other:?}")),
        }
    }
}

/// One stored tensor: dtype, shape and the raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

impl TensorEntry {
    pub fn from_f64(shape: Vec<usize>, values: &[f64], dtype: DType) -> Result<Self, ContainerError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(ContainerError::NbytesMismatch {
                name: String::new(),
                dtype: dtype.as_str(),
                shape,
                expected: numel * dtype.size(),
                got: values.len() * dtype.size(),
            });
        }
        let mut payload = Vec::with_capacity(numel * dtype.size());
        match dtype {
            DType::F32 => values.iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => values.iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(Self { dtype, shape, payload })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Payload widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

/// Whether `name` is a legal tensor name (`[A-Za-z0-9_./-]+`).
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'/' | b'-'))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: BTreeMap<String, TensorEntry>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorHeader>,
}

// Field order is alphabetical so the serialized keys come out sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    dtype: String,
    nbytes: u64,
    offset: u64,
    shape: Vec<u64>,
}

impl TensorContainer {
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
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry, ContainerError> {
        self.entries.get(name).ok_or_else(|| ContainerError::MissingTensor(name.to_owned()))
    }

    /// Adds a tensor. Names must be valid and unique.
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<(), ContainerError> {
        let name = name.into();
        if !is_valid_name(&name) {
            return Err(ContainerError::InvalidName(name));
        }
        if self.entries.contains_key(&name) {
            return Err(ContainerError::DuplicateName(name));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix, dtype: DType) -> Result<(), ContainerError> {
        let entry = TensorEntry::from_f64(vec![m.rows(), m.cols()], m.data(), dtype)?;
        self.insert(name, entry)
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64], dtype: DType) -> Result<(), ContainerError> {
        let entry = TensorEntry::from_f64(vec![v.len()], v, dtype)?;
        self.insert(name, entry)
    }

    /// Reads a rank-2 tensor as a matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let entry = self.entry(name)?;
        if entry.shape.len() != 2 {
            return Err(ContainerError::UnexpectedRank { name: name.to_owned(), expected: 2, shape: entry.shape.clone() }
                .into());
        }
        Matrix::new(entry.shape[0], entry.shape[1], entry.to_f64())
    }

    /// Reads a rank-1 tensor.
    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let entry = self.entry(name)?;
        if entry.shape.len() != 1 {
            return Err(ContainerError::UnexpectedRank { name: name.to_owned(), expected: 1, shape: entry.shape.clone() }
                .into());
        }
        let v = entry.to_f64();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("stored vector"));
        }
        Ok(v)
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, ContainerError> {
        self.get_meta(key).ok_or_else(|| ContainerError::MissingMeta(key.to_owned()))
    }

    /// Parses a required metadata value.
    pub fn parse_meta<T: FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| ContainerError::InvalidMeta { key: key.to_owned(), value: raw.to_owned() })
    }

    /// Storage dtype shared by all tensors, if they agree.
    pub fn common_dtype(&self) -> Option<DType> {
        let mut it = self.entries.values().map(|e| e.dtype);
        let first = it.next()?;
        it.all(|d| d == first).then_some(first)
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .entries
            .iter()
            .map(|(name, e)| {
                let h = TensorHeader {
                    dtype: e.dtype.as_str().to_owned(),
                    nbytes: e.payload.len() as u64,
                    offset,
                    shape: e.shape.iter().map(|&d| d as u64).collect(),
                };
                offset += e.payload.len() as u64;
                (name.clone(), h)
            })
            .collect();
        let header = Header { meta: self.meta.clone(), tensors };
        serde_json::to_vec(&header).expect("header serialization cannot fail")
    }

    /// Serializes to `w` and returns the number of bytes written.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<u64, ContainerError> {
        let header = self.header_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut total = 16 + header.len() as u64;
        for e in self.entries.values() {
            w.write_all(&e.payload)?;
            total += e.payload.len() as u64;
        }
        w.flush()?;
        Ok(total)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated(format!("{} bytes, no room for the magic", bytes.len())));
        }
        let magic: [u8; 8] = bytes[..8].try_into().unwrap();
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(ContainerError::Truncated("missing header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let data_start = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| ContainerError::Truncated(format!("header of {header_len} bytes runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
        let data = &bytes[data_start..];

        let mut container = TensorContainer { entries: BTreeMap::new(), meta: header.meta };
        for (name, h) in header.tensors {
            if !is_valid_name(&name) {
                return Err(ContainerError::MalformedHeader(format!("invalid tensor name {name:?}")));
            }
            let dtype: DType = h.dtype.parse().map_err(ContainerError::MalformedHeader)?;
            let shape: Vec<usize> = h.shape.iter().map(|&d| d as usize).collect();
            let expected = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::MalformedHeader(format!("tensor {name}: shape overflows")))?;
            if expected as u64 != h.nbytes {
                return Err(ContainerError::NbytesMismatch {
                    name,
                    dtype: dtype.as_str(),
                    shape,
                    expected,
                    got: h.nbytes as usize,
                });
            }
            let end = h.offset.checked_add(h.nbytes).filter(|&end| end <= data.len() as u64).ok_or_else(|| {
                ContainerError::Truncated(format!(
                    "tensor {name} spans bytes {}..{} but the data section has {}",
                    h.offset,
                    h.offset.saturating_add(h.nbytes),
                    data.len()
                ))
            })?;
            let payload = data[h.offset as usize..end as usize].to_vec();
            container.entries.insert(name, TensorEntry { dtype, shape, payload });
        }
        Ok(container)
    }
}

/// Writes `c` to `path` atomically (temporary file in the same directory, then rename).
/// Returns the number of bytes written.
pub fn write_container(c: &TensorContainer, path: impl AsRef<Path>) -> Result<u64, ContainerError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let n = c.write_to(io::BufWriter::new(tmp.as_file_mut()))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ContainerError::Io(e.error))?;
    Ok(n)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer, ContainerError> {
    let bytes = fs::read(path)?;
    TensorContainer::from_bytes(&bytes)
}
