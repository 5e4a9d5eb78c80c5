//! Named-tensor archive.
//!
//! Layout: the 8-byte magic `CATCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! The header lists each net's architecture descriptor and tensor
//! `(name, shape, kind)` entries, plus an optional free-form `records` value.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, NetState, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CATCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionHeader {
    label: String,
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    nets: Vec<SectionHeader>,
    #[serde(default)]
    records: serde_json::Value,
}

/// One stored network.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub label: String,
    pub architecture: Architecture,
    pub tensors: Vec<(TensorEntry, Tensor)>,
}

impl Section {
    pub fn from_state(label: &str, state: &NetState) -> Self {
        let params = state
            .names()
            .iter()
            .zip(state.params())
            .map(|(n, t)| (n, t, TensorKind::Param));
        let buffers = state
            .buffer_names()
            .iter()
            .zip(state.buffers())
            .map(|(n, t)| (n, t, TensorKind::Buffer));
        let tensors = params
            .chain(buffers)
            .map(|(n, t, kind)| {
                let entry = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    kind,
                };
                (entry, quantize(t))
            })
            .collect();
        Self {
            label: label.to_string(),
            architecture: state.architecture().clone(),
            tensors,
        }
    }

    /// Copy stored values into `state`, which must have the same architecture.
    pub fn restore(&self, state: &mut NetState) -> Result<()> {
        if &self.architecture != state.architecture() {
            return Err(Error::Shape(format!(
                "checkpoint section `{}` architecture differs from the target net",
                self.label
            )));
        }
        for (entry, t) in &self.tensors {
            let (names, slot) = match entry.kind {
                TensorKind::Param => (state.names().to_vec(), 0),
                TensorKind::Buffer => (state.buffer_names().to_vec(), 1),
            };
            let i = names
                .iter()
                .position(|n| n == &entry.name)
                .ok_or_else(|| Error::Shape(format!("unknown tensor `{}`", entry.name)))?;
            let dst = if slot == 0 {
                &mut state.params_mut()[i]
            } else {
                &mut state.buffers_mut()[i]
            };
            if dst.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{}`: stored {:?}, net has {:?}",
                    entry.name,
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
    pub records: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: &str, state: &NetState) {
        self.sections.push(Section::from_state(label, state));
    }

    pub fn section(&self, label: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.label == label)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            nets: self
                .sections
                .iter()
                .map(|s| SectionHeader {
                    label: s.label.clone(),
                    architecture: s.architecture.clone(),
                    tensors: s.tensors.iter().map(|(e, _)| e.clone()).collect(),
                })
                .collect(),
            records: self.records.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sections {
            for (_, t) in &s.tensors {
                for v in t.data() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut sections = Vec::with_capacity(header.nets.len());
        for sh in header.nets {
            let mut tensors = Vec::with_capacity(sh.tensors.len());
            for e in sh.tensors {
                let n: usize = e.shape.iter().product();
                let raw = bytes
                    .get(pos..pos + 4 * n)
                    .ok_or_else(|| bad(&format!("truncated tensor `{}`", e.name)))?;
                pos += 4 * n;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                let t = Tensor::new(e.shape.clone(), data)?;
                tensors.push((e, t));
            }
            sections.push(Section {
                label: sh.label,
                architecture: sh.architecture,
                tensors,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            sections,
            records: header.records,
        })
    }

    /// Atomic write: a temporary sibling file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Round every value through `f32`, the archive's storage precision.
fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Round a net's parameters and buffers to `f32` precision in place, so the
/// in-memory net equals what a checkpoint reload produces.
pub fn quantize_state(state: &mut NetState) {
    for t in state.params_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    for t in state.buffers_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EmbedderConfig, EmbedderNet};
    use crate::spectrogram::SpecShape;

    fn small() -> EmbedderNet {
        let cfg = EmbedderConfig {
            widths: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 8,
            freq_coord: true,
            time_coord: false,
        };
        EmbedderNet::new(cfg, SpecShape::new(1, 8, 6), 3).unwrap()
    }

    #[test]
    fn reload_is_bit_exact() {
        let mut net = small();
        quantize_state(&mut net.state);
        let mut ck = Checkpoint::new();
        ck.push("embedder", &net.state);
        ck.records = serde_json::json!([{"class": 1}]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut other = EmbedderNet::new(net.config().clone(), net.input_shape(), 99).unwrap();
        back.section("embedder").unwrap().restore(&mut other.state).unwrap();
        assert_eq!(other.state.params(), net.state.params());
        assert_eq!(other.state.buffers(), net.state.buffers());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let net = small();
        let mut ck = Checkpoint::new();
        ck.push("embedder", &net.state);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"nope", Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
