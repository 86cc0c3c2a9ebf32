//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MPQT"
//! version u16      currently 1
//! count   u32      number of entries
//! entry   repeated:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   0=f32 1=f64 2=u8 3=u16 4=i64
//!   rank     u8
//!   dims     rank x u64
//!   payload  prod(dims) x dtype size
//! ```
//!
//! The reader bounds-checks every field, so corrupt or truncated files
//! produce structured errors instead of panics or oversized allocations.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MPQT";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes of fixed framing before the first entry.
pub const HEADER_BYTES: u64 = 10;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unexpected end of container")]
    UnexpectedEnd,

    #[error("invalid dtype code {0}")]
    InvalidDtype(u8),

    #[error("entry name is not valid UTF-8")]
    InvalidName,

    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),

    #[error("entry {name:?}: payload of {actual} values does not match dims {dims:?}")]
    LengthMismatch {
        name: String,
        dims: Vec<u64>,
        actual: usize,
    },

    #[error("declared size overflows")]
    SizeOverflow,
}

pub type Result<T> = std::result::Result<T, ContainerError>;

/// Typed payload of one entry.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::U16(_) => 3,
            TensorData::I64(_) => 4,
        }
    }

    fn value_size(code: u8) -> Option<usize> {
        match code {
            0 => Some(4),
            1 => Some(8),
            2 => Some(1),
            3 => Some(2),
            4 => Some(8),
            _ => None,
        }
    }
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or(ContainerError::SizeOverflow)?;
        if expected != data.len() as u64 {
            return Err(ContainerError::LengthMismatch {
                name,
                dims,
                actual: data.len(),
            });
        }
        Ok(Self { name, dims, data })
    }

    pub fn f64_vec(name: impl Into<String>, values: Vec<f64>) -> Self {
        let dims = vec![values.len() as u64];
        Self {
            name: name.into(),
            dims,
            data: TensorData::F64(values),
        }
    }

    pub fn f64_matrix(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(name, vec![rows as u64, cols as u64], TensorData::F64(values))
    }

    pub fn u8_vec(name: impl Into<String>, values: Vec<u8>) -> Self {
        let dims = vec![values.len() as u64];
        Self {
            name: name.into(),
            dims,
            data: TensorData::U8(values),
        }
    }

    pub fn i64_vec(name: impl Into<String>, values: Vec<i64>) -> Self {
        let dims = vec![values.len() as u64];
        Self {
            name: name.into(),
            dims,
            data: TensorData::I64(values),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            _ => None,
        }
    }
}

/// Serialize entries to bytes.
pub fn to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    for e in entries {
        if !seen.insert(&e.name) {
            return Err(ContainerError::DuplicateName(e.name.clone()));
        }
        Entry::new(e.name.clone(), e.dims.clone(), e.data.clone())?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype_code());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::SizeOverflow)?;
        if end > self.bytes.len() {
            return Err(ContainerError::UnexpectedEnd);
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse entries from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ContainerError::InvalidName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        let dtype = r.u8()?;
        let value_size = TensorData::value_size(dtype).ok_or(ContainerError::InvalidDtype(dtype))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or(ContainerError::SizeOverflow)?;
        let payload_len = count
            .checked_mul(value_size as u64)
            .ok_or(ContainerError::SizeOverflow)?;
        if payload_len > (bytes.len() - r.pos) as u64 {
            return Err(ContainerError::UnexpectedEnd);
        }
        let payload = r.take(payload_len as usize)?;
        let n = count as usize;
        let data = match dtype {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::U8(payload.to_vec()),
            3 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            4 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => unreachable!("dtype validated above"),
        };
        debug_assert_eq!(data.len(), n);
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}

/// Write a container file.
pub fn save_container(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    fs::write(path, to_bytes(entries)?)?;
    Ok(())
}

/// Read a container file.
pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    from_bytes(&fs::read(path)?)
}

/// Find an entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| {
        ContainerError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing entry {name:?}"),
        ))
    })
}
