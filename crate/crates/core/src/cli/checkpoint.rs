//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "S2G1"  u32 version  u64 header_len  header (JSON: task, config, vocab)
//! u64 n_tensors
//! per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[..]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"S2G1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retriever,
    Reader,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Retriever => "retriever",
            Task::Reader => "reader",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    task: Task,
    config: RunConfig,
    vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt file ({what})"))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(what))
    }
}

impl Checkpoint {
    pub fn capture(task: Task, config: &RunConfig, vocab: Vec<String>, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { task, config: config.clone(), vocab, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header =
            serde_json::to_vec(&Header { task: self.task, config: self.config.clone(), vocab: self.vocab.clone() })?;
        let mut out =
            Vec::with_capacity(header.len() + 16 + self.tensors.iter().map(|(_, t)| 8 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not an S2G1 checkpoint".into()));
        }
        let version = c.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let n = c.len("header length")?;
        let header: Header =
            serde_json::from_slice(c.take(n, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = c.len("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(n, "name")?).map_err(|_| corrupt("name"))?.to_string();
            let ndim = c.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| c.len("dims")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("dims"))?;
            let bytes = c.take(numel.checked_mul(8).ok_or_else(|| corrupt("dims"))?, "payload")?;
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if c.pos != buf.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { task: header.task, config: header.config, vocab: header.vocab, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies the stored tensors into a freshly built store. Names and shapes
    /// must match one to one.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the configured model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.lookup(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
