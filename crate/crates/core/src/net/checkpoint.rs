//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLTC" | version u32 | step u64 | count u32 |
//!   count × ( name_len u32 | name bytes | rank u32 | rank × dim u32 | f32 payload )
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLTC";
pub const CHECKPOINT_VERSION: u32 = 1;
const FILE_PREFIX: &str = "ckpt-";
const FILE_SUFFIX: &str = ".sltc";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(step: u64, tensors: Vec<NamedTensor>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| corrupt("missing magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| corrupt("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let step = r.u64().ok_or_else(|| corrupt("missing step".into()))?;
        let count = r.u32().ok_or_else(|| corrupt("missing tensor count".into()))?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let truncated = || corrupt(format!("truncated in tensor {i}"));
            let name_len = r.u32().ok_or_else(truncated)? as usize;
            let name = r.take(name_len).ok_or_else(truncated)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt(format!("tensor {i} name is not utf-8")))?;
            let rank = r.u32().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(truncated)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor {name} shape overflows")))?;
            let payload = n
                .checked_mul(4)
                .and_then(|len| r.take(len))
                .ok_or_else(truncated)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            step,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("{FILE_PREFIX}{step:010}{FILE_SUFFIX}"))
}

/// Writes `ckpt` atomically into `dir` and returns its path.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, ckpt.step);
    write_atomic(&path, &ckpt.to_bytes())?;
    Ok(path)
}

/// Loads the checkpoint with the highest step in `dir`.
pub fn restore_latest(dir: &Path) -> Result<Checkpoint> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("checkpoint directory {}", dir.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(step) = name
            .strip_prefix(FILE_PREFIX)
            .and_then(|s| s.strip_suffix(FILE_SUFFIX))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    let (step, path) = best.ok_or_else(|| Error::NotFound(format!("no checkpoint in {}", dir.display())))?;
    let ckpt = Checkpoint::from_bytes(&fs::read(&path)?, &path)?;
    if ckpt.step != step {
        return Err(Error::CorruptCheckpoint {
            path,
            reason: format!("file name says step {step}, contents say {}", ckpt.step),
        });
    }
    Ok(ckpt)
}
