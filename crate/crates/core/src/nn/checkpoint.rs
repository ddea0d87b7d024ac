//! `avrnn-ckpt v1`: a named-tensor container.
//!
//! ```text
//! avrnn-ckpt v1
//! meta <key> <value>                 (zero or more)
//! tensor <name> <tag> <d0> <d1> ...  (one per tensor, in payload order)
//! data
//! <little-endian f64 payload, tensors concatenated in header order>
//! ```
//!
//! Header lines are UTF-8 terminated by `\n`. Names, tags and meta keys
//! contain no whitespace; meta values run to the end of the line. A tensor
//! with no dims is a scalar.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::{ParameterStore, Tag};
use crate::autodiff::Tensor;

pub const MAGIC: &str = "avrnn-ckpt v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("not an avrnn-ckpt v1 file (first line {0:?})")]
    Version(String),
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tag: Tag,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore) -> Self {
        let tensors = store
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tag: p.tag,
                value: p.value.clone(),
            })
            .collect();
        Checkpoint {
            meta: Vec::new(),
            tensors,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copies tensor values into `store`. Names, tags and shapes must match
    /// one-to-one; on error the store is left untouched.
    pub fn apply_to(&self, store: &mut ParameterStore) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors in checkpoint, {} in model",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let p = store
                .by_name(&t.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {}", t.name)))?;
            if p.tag != t.tag || p.value.shape() != t.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: checkpoint has {} {:?}, model expects {} {:?}",
                    t.name,
                    t.tag.name(),
                    t.value.shape(),
                    p.tag.name(),
                    p.value.shape()
                )));
            }
        }
        for t in &self.tensors {
            let id = store.id(&t.name).expect("checked above");
            *store.value_mut(id) = t.value.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.is_empty() || k.chars().any(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::Malformed(format!("bad meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
                return Err(CheckpointError::Malformed(format!(
                    "bad tensor name {:?}",
                    t.name
                )));
            }
            header.push_str(&format!("tensor {} {}", t.name, t.tag.name()));
            for d in t.value.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("data\n");
        w.write_all(header.as_bytes())?;
        let mut buf =
            Vec::with_capacity(8 * self.tensors.iter().map(|t| t.value.len()).sum::<usize>());
        for t in &self.tensors {
            for v in t.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(CheckpointError::Version(line.trim_end().to_string()));
        }
        let mut meta = Vec::new();
        let mut specs: Vec<(String, Tag, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Malformed("missing data marker".into()));
            }
            let l = line.trim_end_matches('\n');
            if l == "data" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().filter(|s| !s.is_empty());
                let tag = parts.next().and_then(Tag::from_name);
                let (Some(name), Some(tag)) = (name, tag) else {
                    return Err(CheckpointError::Malformed(format!("bad tensor line {l:?}")));
                };
                let dims = parts
                    .map(str::parse::<usize>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CheckpointError::Malformed(format!("bad dims in {l:?}")))?;
                specs.push((name.to_string(), tag, dims));
            } else {
                return Err(CheckpointError::Malformed(format!("unexpected line {l:?}")));
            }
        }
        let expected: usize = specs
            .iter()
            .map(|(_, _, d)| 8 * d.iter().product::<usize>())
            .sum();
        let mut payload = Vec::with_capacity(expected);
        r.read_to_end(&mut payload)?;
        if payload.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let mut chunks = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let tensors = specs
            .into_iter()
            .map(|(name, tag, dims)| {
                let n = dims.iter().product();
                let data: Vec<f64> = chunks.by_ref().take(n).collect();
                let value = Tensor::new(dims, data).expect("payload sized from header");
                NamedTensor { name, tag, value }
            })
            .collect();
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
