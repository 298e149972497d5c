//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PNERCKPT"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 JSON
//! count      u64, then `count` tensor blocks:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, then ndim × u64 dims
//!   values   product(dims) × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PNERCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata document plus named tensors, in write order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic bytes")?;
        if magic != MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(
                8,
                format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let meta_len = r.len("metadata length")?;
        let meta_at = r.pos;
        let metadata = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
            .map_err(|_| r.error_at(meta_at, "metadata is not UTF-8"))?;
        let count = r.len("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| r.error_at(name_at, "tensor name is not UTF-8"))?;
            let ndim = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("tensor dimension")?);
            }
            let block_at = r.pos;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| r.error_at(block_at, format!("tensor `{name}` is too large")))?;
            let raw = r.take(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.error_at(block_at, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after last tensor"));
        }
        Ok(RawCheckpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names start with `prefix`, prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.error_at(at, format!("{what} {v} out of range")))
    }
}
