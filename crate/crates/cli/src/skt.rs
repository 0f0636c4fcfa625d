//! SKT tensor container.
//!
//! Layout (little-endian):
//! - magic: `SKTENSR\0`
//! - version: u32 = 1
//! - header_len: u32
//! - header: UTF-8 JSON `{"dtype":"f32"|"f64","shape":[...]}`
//! - payload: values in row-major order

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SKTENSR\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SktError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not an SKT file (bad magic)")]
    BadMagic,
    #[error("unsupported SKT version {0}")]
    BadVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("bad header: {0}")]
    Header(String),
    #[error("payload has {got} bytes, header implies {expected}")]
    PayloadLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
    /// Header bytes as read, reused on write so files round-trip exactly.
    raw_header: Option<Vec<u8>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Data) -> Result<Self, SktError> {
        if shape.is_empty() {
            return Err(SktError::Header("shape must have at least one dimension".into()));
        }
        let n: usize = shape.iter().product();
        let len = match &data {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        };
        if len != n {
            return Err(SktError::Header(format!("{len} values for shape {shape:?}")));
        }
        Ok(Tensor {
            shape,
            data,
            raw_header: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, SktError> {
        Self::new(shape, Data::F64(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, SktError> {
        Self::new(shape, Data::F32(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Data::F32(_) => Dtype::F32,
            Data::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    /// Same shape, new values, stored in `dtype`.
    pub fn with_values(shape: Vec<usize>, values: &[f64], dtype: Dtype) -> Result<Self, SktError> {
        match dtype {
            Dtype::F32 => Self::from_f32(shape, values.iter().map(|&v| v as f32).collect()),
            Dtype::F64 => Self::from_f64(shape, values.to_vec()),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SktError> {
        if bytes.len() < 16 {
            return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                SktError::BadMagic
            } else {
                SktError::Truncated("preamble")
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(SktError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(SktError::BadVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let raw_header = bytes
            .get(16..16 + header_len)
            .ok_or(SktError::Truncated("header"))?;
        let text = std::str::from_utf8(raw_header).map_err(|e| SktError::Header(e.to_string()))?;
        let header: Header = serde_json::from_str(text).map_err(|e| SktError::Header(e.to_string()))?;
        if header.shape.is_empty() {
            return Err(SktError::Header("shape must have at least one dimension".into()));
        }
        let n = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| SktError::Header("shape overflows".into()))?;
        let payload = &bytes[16 + header_len..];
        let expected = n
            .checked_mul(header.dtype.size())
            .ok_or_else(|| SktError::Header("shape overflows".into()))?;
        if payload.len() != expected {
            return Err(SktError::PayloadLength {
                expected,
                got: payload.len(),
            });
        }
        let data = match header.dtype {
            Dtype::F32 => Data::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => Data::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        Ok(Tensor {
            shape: header.shape,
            data,
            raw_header: Some(raw_header.to_vec()),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.raw_header.clone().unwrap_or_else(|| {
            serde_json::to_vec(&Header {
                dtype: self.dtype(),
                shape: self.shape.clone(),
            })
            .expect("header serializes")
        });
        let mut out = Vec::with_capacity(16 + header.len() + self.shape.iter().product::<usize>() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, SktError> {
        let bytes = fs::read(path).map_err(|source| SktError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), SktError> {
        fs::write(path, self.to_bytes()).map_err(|source| SktError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
