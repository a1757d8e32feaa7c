// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PREA"  u16 version  u32 entry count
//! per entry: u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//!            f32 payload in row-major order
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Values are stored as f32, so a round trip is exact only for tensors whose
//! entries are representable in f32.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"PREA";
pub const ARCHIVE_VERSION: u16 = 1;

/// Ordered list of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "entry name of {} bytes is too long",
                name.len()
            )));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "rank {} does not fit the archive",
                tensor.rank()
            )));
        }
        if let Some(&d) = tensor.shape().iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!(
                "dimension {d} does not fit the archive"
            )));
        }
        if let Some(v) = tensor.data().iter().find(|v| (**v as f32).is_infinite()) {
            return Err(Error::Format(format!("value {v} overflows f32")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get), but missing entries are a format error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive has no entry {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses an archive. The checksum is verified before anything else is
    /// decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(Error::Format(format!(
                "archive of {} bytes is truncated",
                bytes.len()
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("bad magic, not a tensor archive".into()));
        }
        let version = r.u16()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!(
                "unsupported archive version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry {name:?}")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| {
                    Error::Format(format!("entry {name:?} has an overflowing shape {shape:?}"))
                })?;
            let need = n
                .checked_mul(4)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "entry {name:?} declares more data than the archive holds"
                    ))
                })?;
            let data = r
                .take(need)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
            entries.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last entry",
                r.remaining()
            )));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("two bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("w", Tensor::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]))
            .unwrap();
        a.push("s", Tensor::scalar(7.0)).unwrap();
        a.push("v", Tensor::vector(vec![0.5; 3])).unwrap();
        a
    }

    #[test]
    fn layout_is_pinned() {
        let mut a = TensorArchive::new();
        a.push("ab", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let b = a.to_bytes();
        let mut want = b"PREA".to_vec();
        want.extend_from_slice(&[1, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&[2, 0, b'a', b'b', 1, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip() {
        let a = sample();
        assert_eq!(TensorArchive::from_bytes(&a.to_bytes()).unwrap(), a);
        let empty = TensorArchive::new();
        assert!(TensorArchive::from_bytes(&empty.to_bytes())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        let mut a = sample();
        assert!(a.push("w", Tensor::scalar(1.0)).is_err());
        assert!(a.push("big", Tensor::scalar(1e300)).is_err());
        let bytes = a.to_bytes();
        assert!(matches!(
            TensorArchive::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Checksum { .. })
        ));
        assert!(TensorArchive::from_bytes(&bytes[..5]).is_err());

        // a body that checksums but has the wrong magic
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[0] = b'X';
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            TensorArchive::from_bytes(&body),
            Err(Error::Format(_))
        ));
        assert!(a.require("missing").is_err());
    }

    #[test]
    fn values_round_to_f32() {
        let mut a = TensorArchive::new();
        a.push("x", Tensor::scalar(0.1)).unwrap();
        let b = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.require("x").unwrap().item(), 0.1f32 as f64);
    }
}
