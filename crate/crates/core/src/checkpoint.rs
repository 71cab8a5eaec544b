//! Versioned binary container for model parameters.
//!
//! Layout: 8-byte magic, u32 format version, u64 descriptor length, UTF-8
//! `key=value` descriptor lines, u64 tensor count, then per tensor a u64
//! rank, u64 dimensions and u64 value count followed by the values. All
//! integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"REPINVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("descriptor mismatch on `{key}`: expected {expected:?}, found {found:?}")]
    DescriptorMismatch { key: String, expected: String, found: Option<String> },
}

/// Architecture descriptor plus parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(descriptor: BTreeMap<String, String>, tensors: Vec<Tensor>) -> Self {
        Self { descriptor, tensors }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.descriptor.get(key).map(String::as_str)
    }

    /// Looks up a descriptor key and parses it.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.get(key).ok_or_else(|| CheckpointError::Corrupt(format!("missing descriptor key `{key}`")))?;
        raw.parse().map_err(|_| CheckpointError::Corrupt(format!("bad value {raw:?} for `{key}`")))
    }

    /// Fails unless every `(key, value)` in `expected` appears verbatim.
    pub fn expect(&self, expected: &BTreeMap<String, String>) -> Result<(), CheckpointError> {
        for (k, v) in expected {
            let found = self.get(k);
            if found != Some(v.as_str()) {
                return Err(CheckpointError::DescriptorMismatch {
                    key: k.clone(),
                    expected: v.clone(),
                    found: found.map(str::to_owned),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut desc = String::new();
        for (k, v) in &self.descriptor {
            desc.push_str(k);
            desc.push('=');
            desc.push_str(v);
            desc.push('\n');
        }
        out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("descriptor is not UTF-8".into()))?;
        let mut descriptor = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("descriptor line {line:?}")))?;
            descriptor.insert(k.to_owned(), v.to_owned());
        }
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let n = r.len()?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("blob length".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("needs {n} bytes at offset {}, file has {}", self.at, self.bytes.len()))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("length {v} overflows")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut d = BTreeMap::new();
        d.insert("kind".into(), "test".into());
        Checkpoint::new(d, vec![Tensor::new(vec![2], vec![1.5, -0.0]).unwrap(), Tensor::scalar(f64::MIN_POSITIVE)])
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.descriptor, c.descriptor);
        for (a, b) in back.tensors.iter().zip(&c.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version { found: 9, .. })));
        v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::BadMagic)));
    }
}
