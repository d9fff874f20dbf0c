//! Tensor container files.
//!
//! Layout: one line of UTF-8 JSON (the header) terminated by `\n`, then the
//! raw little-endian payload. Tensors are stored row-major, back to back, in
//! header order. The header carries the element type, each tensor's name,
//! shape and byte range, optional model config, free-form metadata and the
//! CRC32 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TransformerConfig;
use crate::tensor::{DType, Scalar, Tensor};

pub const FORMAT: &str = "probekit-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TransformerConfig>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub crc32: u32,
}

/// In-memory contents of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile<F> {
    pub config: Option<TransformerConfig>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> TensorFile<F> {
    pub fn new(config: Option<TransformerConfig>) -> Self {
        Self {
            config,
            metadata: serde_json::Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.push((name.into(), tensor));
    }

    /// Serializes with `dtype` as the on-disk element type.
    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &x in t.data() {
                match dtype {
                    DType::F32 => (x.as_f64() as f32).push_le(&mut payload),
                    DType::F64 => x.as_f64().push_le(&mut payload),
                }
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
            payload_bytes: payload.len(),
            crc32: crc32fast::hash(&payload),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype);
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Parses a container. The checksum is verified before any tensor is
    /// decoded, so a damaged file never yields partial contents.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header("no newline terminating the header".into()))?;
        let text = std::str::from_utf8(&bytes[..newline])
            .map_err(|e| Error::Header(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::Header(format!("unknown format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Header(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let payload = &bytes[newline + 1..];
        let actual = crc32fast::hash(payload);
        if actual != header.crc32 || payload.len() != header.payload_bytes {
            return Err(Error::Checksum {
                expected: header.crc32,
                actual,
            });
        }
        let width = header.dtype.size();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let [rows, cols] = e.shape;
            if e.nbytes != rows * cols * width {
                return Err(Error::Shape(format!(
                    "{}: {} bytes cannot hold {rows}x{cols} {:?} values",
                    e.name, e.nbytes, header.dtype
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Header(format!("{}: byte range out of bounds", e.name)))?;
            let data = payload[e.offset..end]
                .chunks_exact(width)
                .map(|chunk| match header.dtype {
                    DType::F32 => F::of(f32::read_le(chunk) as f64),
                    DType::F64 => F::of(f64::read_le(chunk)),
                })
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(rows, cols, data)));
        }
        if let Some(config) = &header.config {
            config.validate()?;
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn metadata_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(serde_json::Value::as_str)
    }

    pub fn metadata_u64(&self, key: &str) -> Option<u64> {
        self.metadata.get(key).and_then(serde_json::Value::as_u64)
    }
}

/// Reads only the header line.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("no newline terminating the header".into()))?;
    serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Header(e.to_string()))
}
