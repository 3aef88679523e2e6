//! Checkpoint serialization.
//!
//! Layout (little-endian throughout):
//! magic `NAELCK1\0`, version u32, tensor count u32; then per tensor:
//! name length u16 + UTF-8 name, rank u8, one u32 per dimension, and the
//! data as raw f32 words. Values are stored at 32-bit precision, so a
//! round trip is byte-exact at the file level and exact at f32 precision
//! at the tensor level.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NaelError, Result};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NAELCK1\0";
pub const VERSION: u32 = 1;

/// An ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serialize to bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| NaelError::Size("too many tensors for checkpoint".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            let name_len = u16::try_from(name_bytes.len())
                .map_err(|_| NaelError::Size(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            let rank = u8::try_from(tensor.rank())
                .map_err(|_| NaelError::Size("tensor rank exceeds u8".into()))?;
            out.push(rank);
            for &d in &tensor.shape {
                let d = u32::try_from(d).map_err(|_| NaelError::Size("dimension exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse from bytes, reporting the byte offset of any malformation.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8, "magic")?;
        if magic != MAGIC {
            return Err(NaelError::Format { offset: 0, msg: "bad magic, expected NAELCK1".into() });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(NaelError::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = cur.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16("name length")? as usize;
            let name_off = cur.pos;
            let name_bytes = cur.take(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| NaelError::Format {
                    offset: name_off as u64,
                    msg: "tensor name is not valid UTF-8".into(),
                })?
                .to_string();
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let data_off = cur.pos;
            let raw = cur.take(numel * 4, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NaelError::Format {
                    offset: data_off as u64,
                    msg: format!("non-finite value in tensor '{name}'"),
                });
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(NaelError::Format {
                offset: cur.pos as u64,
                msg: format!("{} trailing bytes after last tensor", bytes.len() - cur.pos),
            });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form; used to assert frozen weights.
    pub fn digest(&self) -> Result<[u8; 32]> {
        use sha2::{Digest, Sha256};
        let bytes = self.to_bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hasher.finalize().into())
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NaelError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("w1", Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.25, 3.0, 0.0, -7.5]).unwrap());
        ck.push("b1", Tensor::from_vec(&[3], vec![0.125, 0.5, -1.0]).unwrap());
        ck
    }

    #[test]
    fn byte_exact_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest().unwrap(), ck.digest().unwrap());
    }

    #[test]
    fn corrupted_magic_names_byte_zero() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(NaelError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        let cut = bytes.len() - 3;
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(NaelError::Format { offset, msg }) => {
                assert!(offset as usize <= cut, "{offset} {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(NaelError::Format { .. })
        ));
    }
}
