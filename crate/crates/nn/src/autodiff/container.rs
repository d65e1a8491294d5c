//! Binary checkpoint container.
//!
//! Layout (little-endian): `CKPT1`, `u32` metadata length, metadata as
//! `key=value` lines, `u32` tensor count, then per tensor `u32` name length,
//! name, `u32` rank, `u64` dims, `f64` values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn malformed(s: impl Into<String>) -> ContainerError {
    ContainerError::Malformed(s.into())
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4], ContainerError> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| malformed(format!("{what} too long")))
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>, ContainerError> {
    let mut meta = String::new();
    for (k, v) in &c.meta {
        if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
            return Err(malformed(format!("metadata key {k:?} cannot be stored")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    let mut out = MAGIC.to_vec();
    out.extend(len_u32(meta.len(), "metadata")?);
    out.extend(meta.as_bytes());
    out.extend(len_u32(c.tensors.len(), "tensor list")?);
    for (name, t) in &c.tensors {
        out.extend(len_u32(name.len(), "tensor name")?);
        out.extend(name.as_bytes());
        out.extend(len_u32(t.shape().len(), "shape")?);
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, ContainerError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| malformed("text is not UTF-8"))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5).ok() != Some(&MAGIC[..]) {
        return Err(malformed("bad magic"));
    }
    let n = r.u32()?;
    let mut meta = BTreeMap::new();
    for line in r.text(n)?.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| malformed(format!("metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.text(n)?.to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut total: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| malformed("dimension overflow"))?;
            total = total.checked_mul(d).ok_or_else(|| malformed("dimension overflow"))?;
            shape.push(d);
        }
        let raw = r.take(total.checked_mul(8).ok_or_else(|| malformed("dimension overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(Container { meta, tensors })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })?;
    decode_container(&bytes)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<(), ContainerError> {
    let path = path.as_ref();
    let bytes = encode_container(c)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io = |source| ContainerError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}
