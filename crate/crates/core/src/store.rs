//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout: 8-byte magic `SEDDSTOR`, little-endian `u32` format version,
//! little-endian `u64` header length, UTF-8 JSON header, then the tensor
//! payloads back to back as little-endian floats in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEDDSTOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data: TensorData::F32(data),
        });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    dtype: match t.data {
                        TensorData::F32(_) => "f32".into(),
                        TensorData::F64(_) => "f64".into(),
                    },
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| match &t.data {
                TensorData::F32(v) => v.len() * 4,
                TensorData::F64(v) => v.len() * 8,
            })
            .sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Init(format!("corrupt container: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Init(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut cursor = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = match entry.dtype.as_str() {
                "f32" => {
                    let (chunk, rest) = split_checked(cursor, n * 4).ok_or_else(|| corrupt("truncated tensor"))?;
                    cursor = rest;
                    TensorData::F32(
                        chunk
                            .chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                            .collect(),
                    )
                }
                "f64" => {
                    let (chunk, rest) = split_checked(cursor, n * 8).ok_or_else(|| corrupt("truncated tensor"))?;
                    cursor = rest;
                    TensorData::F64(
                        chunk
                            .chunks_exact(8)
                            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(corrupt(&format!("unknown dtype {other}"))),
            };
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Init(format!("reading {}: {e}", path.display())))?;
        Container::from_bytes(&bytes)
            .map_err(|e| Error::Init(format!("{}: {e}", path.display())))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Init(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn split_checked(buf: &[u8], n: usize) -> Option<(&[u8], &[u8])> {
    (buf.len() >= n).then(|| buf.split_at(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(a in proptest::collection::vec(any::<f32>(), 0..40),
                       b in proptest::collection::vec(any::<f64>(), 0..40)) {
            let mut c = Container::new("test", serde_json::json!({"k": 1}));
            c.push_f32("a", vec![a.len()], a.clone());
            c.push_f64("b", vec![1, b.len()], b.clone());
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let bits32: Vec<u32> = back.get("a").unwrap().data.to_f32().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits32, a.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            let bits64: Vec<u64> = back.get("b").unwrap().data.to_f64().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits64, b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.kind, "test");
        }
    }

    #[test]
    fn truncated_payload_is_init_error() {
        let mut c = Container::new("test", serde_json::Value::Null);
        c.push_f32("a", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Init(_))
        ));
        assert!(matches!(Container::from_bytes(b"garbage"), Err(Error::Init(_))));
    }
}
