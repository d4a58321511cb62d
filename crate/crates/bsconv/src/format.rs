//! BSWT binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "BSWT"
//! version u32      currently 1; mismatches are rejected, never coerced
//! count   u32      number of entries
//! entry:
//!   name_len u16   UTF-8 name bytes follow
//!   dtype    u8    0 = f32, 1 = f64
//!   ndim     u8    1..=4
//!   dims     u32 x ndim
//!   payload  raw little-endian scalars, product(dims) of them
//! ```
//!
//! Round-trips are bit-exact: payload bytes are the IEEE-754 bit patterns.
//! Read errors carry the byte offset where parsing stopped.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::{Dtype, Scalar, ShapeError, Tensor};

pub const MAGIC: [u8; 4] = *b"BSWT";
pub const VERSION: u32 = 1;

/// A named tensor of either scalar width.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorEntry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorEntry {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorEntry::F32(_) => Dtype::F32,
            TensorEntry::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorEntry::F32(t) => t.shape(),
            TensorEntry::F64(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorEntry::F32(t) => t.len(),
            TensorEntry::F64(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// View as f64 regardless of stored width (converting if needed).
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorEntry::F32(t) => t.convert(),
            TensorEntry::F64(t) => t.clone(),
        }
    }
}

impl From<Tensor<f32>> for TensorEntry {
    fn from(t: Tensor<f32>) -> Self {
        TensorEntry::F32(t)
    }
}

impl From<Tensor<f64>> for TensorEntry {
    fn from(t: Tensor<f64>) -> Self {
        TensorEntry::F64(t)
    }
}

#[derive(Debug)]
pub enum FormatError {
    Io(std::io::Error),
    BadMagic { found: [u8; 4] },
    UnsupportedVersion { found: u32 },
    /// Input ended early: `needed` more bytes at `offset`.
    Truncated { offset: usize, needed: usize },
    BadName { offset: usize },
    BadDtype { code: u8, offset: usize },
    BadShape { offset: usize, detail: String },
    DuplicateName { name: String },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::BadMagic { found } => {
                write!(f, "bad magic {found:?}, expected {MAGIC:?}")
            }
            FormatError::UnsupportedVersion { found } => {
                write!(f, "unsupported format version {found}, expected {VERSION}")
            }
            FormatError::Truncated { offset, needed } => {
                write!(f, "truncated file: needed {needed} more bytes at offset {offset}")
            }
            FormatError::BadName { offset } => {
                write!(f, "entry name at offset {offset} is not valid UTF-8")
            }
            FormatError::BadDtype { code, offset } => {
                write!(f, "unknown dtype code {code} at offset {offset}")
            }
            FormatError::BadShape { offset, detail } => {
                write!(f, "bad shape at offset {offset}: {detail}")
            }
            FormatError::DuplicateName { name } => {
                write!(f, "duplicate entry name '{name}'")
            }
        }
    }
}

impl Error for FormatError {}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        FormatError::Io(e)
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    entries: Vec<(String, TensorEntry)>,
}

impl WeightFile {
    pub fn new() -> Self {
        WeightFile::default()
    }

    pub fn push(&mut self, name: &str, entry: impl Into<TensorEntry>) -> Result<(), FormatError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(FormatError::DuplicateName {
                name: name.to_string(),
            });
        }
        self.entries.push((name.to_string(), entry.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, TensorEntry)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            assert!(name_bytes.len() <= u16::MAX as usize, "entry name too long");
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(entry.dtype().code());
            out.push(entry.shape().len() as u8);
            for &d in entry.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match entry {
                TensorEntry::F32(t) => {
                    for &x in t.data() {
                        x.write_le(&mut out);
                    }
                }
                TensorEntry::F64(t) => {
                    for &x in t.data() {
                        x.write_le(&mut out);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version });
        }
        let count = r.u32()? as usize;
        let mut file = WeightFile::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_offset = r.offset;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| FormatError::BadName { offset: name_offset })?
                .to_string();
            let dtype_offset = r.offset;
            let code = r.u8()?;
            let dtype = Dtype::from_code(code).ok_or(FormatError::BadDtype {
                code,
                offset: dtype_offset,
            })?;
            let shape_offset = r.offset;
            let ndim = r.u8()? as usize;
            if ndim == 0 || ndim > crate::tensor::MAX_AXES {
                return Err(FormatError::BadShape {
                    offset: shape_offset,
                    detail: format!("ndim {ndim} outside 1..=4"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count = shape.iter().try_fold(1usize, |acc, &d| {
                acc.checked_mul(d).filter(|_| d > 0)
            });
            let count = count.ok_or_else(|| FormatError::BadShape {
                offset: shape_offset,
                detail: format!("invalid dims {shape:?}"),
            })?;
            let payload = r.take(count * dtype.size())?;
            let entry = match dtype {
                Dtype::F32 => {
                    let data: Vec<f32> =
                        payload.chunks_exact(4).map(f32::read_le).collect();
                    TensorEntry::F32(tensor_from(shape, data)?)
                }
                Dtype::F64 => {
                    let data: Vec<f64> =
                        payload.chunks_exact(8).map(f64::read_le).collect();
                    TensorEntry::F64(tensor_from(shape, data)?)
                }
            };
            file.push(&name, entry)?;
        }
        Ok(file)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), FormatError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, FormatError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn tensor_from<S: Scalar>(shape: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>, FormatError> {
    Tensor::from_vec(&shape, data).map_err(|e: ShapeError| FormatError::BadShape {
        offset: 0,
        detail: e.to_string(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.offset + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
