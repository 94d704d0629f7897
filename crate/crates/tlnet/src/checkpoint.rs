//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TLNT"                      magic, 4 bytes
//! u32                         format version (1)
//! repeated until end of file:
//!   u32                       name length in bytes
//!   [u8]                      name, UTF-8
//!   u32 × 4                   dims (n, c, h, w)
//!   f64 × n·c·h·w             values, row-major
//! ```
//!
//! A sidecar `<file>.toml` records the configuration that produced the
//! parameters and its hash.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tlnet_core::tensor::{ParamSet, Tensor4};

use crate::config::ExperimentConfig;

pub const MAGIC: &[u8; 4] = b"TLNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated in record {0}")]
    Truncated(usize),
    #[error("record {0} has a non-UTF-8 name")]
    BadName(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.record))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut c = Cursor {
        bytes,
        pos: 4,
        record: 0,
    };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut params = ParamSet::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::BadName(c.record))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = c.u32()? as usize;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(CheckpointError::Truncated(c.record))?;
        let raw = c.take(count)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.add(name, Tensor4::from_vec(dims, data).expect("length checked"));
        c.record += 1;
    }
    Ok(params)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub format_version: u32,
    pub config: ExperimentConfig,
}

fn io(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    config: &ExperimentConfig,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(&encode(params)).map_err(io(path))?;
    let side = sidecar_path(path);
    let meta = Sidecar {
        config_hash: config.hash(),
        format_version: FORMAT_VERSION,
        config: config.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| CheckpointError::Sidecar {
        path: side.clone(),
        message: e.to_string(),
    })?;
    fs::write(&side, text).map_err(io(&side))
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    decode(&fs::read(path).map_err(io(path))?)
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar, CheckpointError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io(&side))?;
    toml::from_str(&text).map_err(|e| CheckpointError::Sidecar {
        path: side,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add(
            "a.w",
            Tensor4::from_vec(
                [2, 1, 1, 3],
                vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0],
            )
            .unwrap(),
        );
        ps.add("b", Tensor4::scalar(std::f64::consts::PI));
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample();
        let bytes = encode(&ps);
        assert_eq!(&bytes[..4], b"TLNT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.len(), 2);
        assert_eq!(back.iter().next().unwrap().name, "a.w");
    }

    #[test]
    fn rejects_foreign_versions_and_damage() {
        let mut bytes = encode(&sample());
        bytes[4] = 7;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::VersionMismatch {
                found: 7,
                expected: 1
            })
        ));
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(1))
        ));
        assert!(matches!(
            decode(b"NOPE\x01\x00\x00\x00"),
            Err(CheckpointError::BadMagic)
        ));
    }
}
