//! Binary checkpoint file.
//!
//! Layout (little-endian):
//!
//! | field          | encoding                                                     |
//! |----------------|--------------------------------------------------------------|
//! | magic          | `SAVC1`                                                      |
//! | version        | `u32`, currently 1                                           |
//! | config digest  | 32 bytes, SHA-256 of the config text minus `mode=` lines     |
//! | config text    | `u32` length + UTF-8 `key=value` lines                       |
//! | tensor count   | `u32`                                                        |
//! | tensor table   | per tensor: `u16` name length, name, `u8` dtype (1 = f64), `u8` rank, `u64` dims, `u64` byte offset into data |
//! | data length    | `u64`                                                        |
//! | data           | concatenated `f64` values in table order                    |
//!
//! Serialisation is deterministic, so save → load → save reproduces the
//! same bytes.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SAVC1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("config digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamSet,
}

/// Digest of the parts of a config that decide weight compatibility.
pub fn config_digest(config: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    for line in config.lines().filter(|l| !l.trim_start().starts_with("mode=")) {
        h.update(line.trim().as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config));
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let len = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config text is not UTF-8".into()))?;
        if config_digest(&config) != digest {
            return Err(CheckpointError::Corrupt("stored digest does not match stored config".into()));
        }
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16("tensor name")? as usize;
            let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Corrupt(format!("unknown dtype {dtype} for {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64("offset")? as usize;
            table.push((name, shape, offset));
        }
        let data_len = r.u64("data length")? as usize;
        let data = r.take(data_len, "data")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut params = ParamSet::new();
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let end = offset + 8 * numel;
            if end > data.len() {
                return Err(CheckpointError::Truncated("tensor data"));
            }
            let values = data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, values).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            if params.id_of(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
            params.add(name, t);
        }
        Ok(Self { config, params })
    }

    /// Errors unless this checkpoint's config digest equals that of `config`.
    pub fn check_compatible(&self, config: &str) -> Result<(), CheckpointError> {
        let (found, expected) = (config_digest(&self.config), config_digest(config));
        if found != expected {
            return Err(CheckpointError::DigestMismatch {
                expected: hex(&expected),
                found: hex(&found),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
        params.add("b", Tensor::full(&[4], f64::MIN_POSITIVE));
        Checkpoint {
            config: "layers=2\nmode=teacher\n".into(),
            params,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn mode_does_not_affect_compatibility() {
        let c = sample();
        assert!(c.check_compatible("layers=2\nmode=student\n").is_ok());
        assert!(matches!(
            c.check_compatible("layers=3\nmode=teacher\n"),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }
}
