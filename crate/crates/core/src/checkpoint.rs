//! Binary tensor checkpoints.
//!
//! Layout: the magic `OTA1`, then one record per tensor until end of file:
//! name length (u64 LE), UTF-8 name, rank (u64 LE), each dim (u64 LE), and
//! the payload as little-endian f32 in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::engine::{Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OTA1";

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<R: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<R>) {
        self.tensors.push((name.into(), tensor.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require<R: Real>(&self, name: &str) -> Result<Tensor<R>> {
        self.get(name)
            .map(|t| t.cast())
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: Checkpoint) {
        self.tensors.extend(other.tensors.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
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
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut tensors = Vec::new();
        while !r.is_empty() {
            let name_len = read_u64(&mut r)? as usize;
            if name_len > r.len() {
                return Err(Error::Format("truncated tensor name".into()));
            }
            let (name, rest) = r.split_at(name_len);
            let name = std::str::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?.to_string();
            r = rest;
            let rank = read_u64(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(Error::Format(format!("truncated payload for `{name}`")));
            }
            let (payload, rest) = r.split_at(numel * 4);
            r = rest;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { tensors })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint record".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
