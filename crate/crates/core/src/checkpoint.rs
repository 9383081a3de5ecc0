//! Bit-exact binary checkpoints of [`ModelParams`].
//!
//! Layout (little-endian): magic `ATNT`, `u32` version, `u32` entry count,
//! then per entry `u16` name length, name bytes, `u8` rank, `u32` extents
//! and `f64` values. A JSON manifest sidecar (`<file>.manifest.json`)
//! records the architecture and the expected entry shapes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AtentError, Result};
use crate::models::{Architecture, ModelParams};
use crate::report::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub architecture: Architecture,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.entries() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes the binary body into `(name, tensor)` entries.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let fail = |detail: String| AtentError::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail,
    };
    let truncated = || fail("truncated".into());
    let mut r = Reader { bytes, at: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(fail(format!("version {version}, expected {VERSION}")));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| fail("entry name is not UTF-8".into()))?;
        let rank = r.u8().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64().ok_or_else(truncated)?);
        }
        let t = Tensor::new(shape, data).map_err(|e| fail(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(entries)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        architecture: params.arch().clone(),
        entries: params
            .entries()
            .map(|(n, t)| ManifestEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_atomic(path, &encode(params))?;
    write_atomic(&manifest_path(path), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| AtentError::io(path, e))?;
    let entries = decode(&bytes, path)?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| AtentError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mismatch = |detail: String| AtentError::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail,
    };
    if manifest.entries.len() != entries.len() {
        return Err(mismatch(format!(
            "manifest lists {} entries, file has {}",
            manifest.entries.len(),
            entries.len()
        )));
    }
    for (m, (name, t)) in manifest.entries.iter().zip(&entries) {
        if &m.name != name || m.shape != t.shape() {
            return Err(mismatch(format!(
                "manifest entry {} {:?} disagrees with file entry {} {:?}",
                m.name,
                m.shape,
                name,
                t.shape()
            )));
        }
    }
    let names: Vec<String> = manifest.architecture.param_shapes().into_iter().map(|(n, _)| n).collect();
    if names.iter().ne(entries.iter().map(|(n, _)| n)) {
        return Err(mismatch("entry names do not match the architecture".into()));
    }
    ModelParams::from_tensors(manifest.architecture, entries.into_iter().map(|(_, t)| t).collect())
}
