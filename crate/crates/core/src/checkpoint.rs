//! Binary checkpoint container.
//!
//! ```text
//! "CSAG" | u32 version | u32 arch hash | u64 step | u32 tensor count
//! per tensor: u32 name len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian. Payloads are `f32`; values
//! that are not exactly representable are rounded on save.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"CSAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("architecture hash {found:#010x} does not match expected {expected:#010x}")]
    ArchMismatch { expected: u32, found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub arch_hash: u32,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a checkpoint. When `expected_hash` is given the
    /// architecture hash must match it.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u32>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        if bytes.len() < 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            // A short file usually fails the checksum too; report it as such
            // only when the structure itself parses.
            return Err(if parse_body(body).is_err() {
                CheckpointError::Truncated
            } else {
                CheckpointError::Checksum
            });
        }
        let ckpt = parse_body(body)?;
        if let Some(expected) = expected_hash {
            if expected != ckpt.arch_hash {
                return Err(CheckpointError::ArchMismatch {
                    expected,
                    found: ckpt.arch_hash,
                });
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path, expected_hash: Option<u32>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

fn parse_body(body: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes: body, pos: 8 };
    let arch_hash = r.u32()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes after tensors".into()));
    }
    Ok(RawCheckpoint {
        arch_hash,
        step,
        tensors,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Encodes a string as a rank-1 tensor of byte values.
pub fn text_tensor(s: &str) -> Tensor {
    let data: Vec<f64> = s.bytes().map(f64::from).collect();
    Tensor::new(vec![data.len()], data).expect("rank-1")
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Option<Vec<u8>> = t
        .data()
        .iter()
        .map(|&v| (v >= 0.0 && v <= 255.0 && v.fract() == 0.0).then_some(v as u8))
        .collect();
    bytes
        .and_then(|b| String::from_utf8(b).ok())
        .ok_or_else(|| CheckpointError::Malformed("text tensor holds non-byte values".into()))
}
