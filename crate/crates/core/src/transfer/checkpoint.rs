//! Single-file binary checkpoints.
//!
//! Layout: `"MDNT"`, little-endian `u32` format version, little-endian `u32`
//! header length, a UTF-8 JSON header (config, tensor manifest, provenance),
//! then every tensor as little-endian `f32` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MedNetConfig, ModelGraph};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const MAGIC: [u8; 4] = *b"MDNT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub created_by: String,
    pub seed: u64,
    pub epochs_trained: usize,
    pub source_dataset_tag: String,
}

impl Provenance {
    pub fn new(seed: u64, epochs_trained: usize, source_dataset_tag: impl Into<String>) -> Self {
        Provenance {
            created_by: format!("mednet {}", env!("CARGO_PKG_VERSION")),
            seed,
            epochs_trained,
            source_dataset_tag: source_dataset_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor within the payload.
    pub offset: u64,
}

impl ManifestEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: MedNetConfig,
    manifest: Vec<ManifestEntry>,
    provenance: Provenance,
}

/// A decoded checkpoint file, before it is turned into a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: MedNetConfig,
    pub manifest: Vec<ManifestEntry>,
    pub provenance: Provenance,
    payload: Vec<f32>,
}

impl Checkpoint {
    /// Snapshot of every parameter, running statistics included. `f64`
    /// graphs are rounded to `f32`.
    pub fn from_graph<T: Element>(graph: &ModelGraph<T>, provenance: Provenance) -> Self {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (name, p) in graph.named_params() {
            manifest.push(ManifestEntry {
                name,
                dtype: "f32".into(),
                shape: p.value.shape().to_vec(),
                offset: (payload.len() * 4) as u64,
            });
            payload.extend(p.value.data().iter().map(|v| v.as_f64() as f32));
        }
        Checkpoint { format_version: FORMAT_VERSION, config: graph.config().clone(), manifest, provenance, payload }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            manifest: self.manifest.clone(),
            provenance: self.provenance.clone(),
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + self.payload.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return bad("bad magic bytes (not a MedNet checkpoint)".into());
        }
        if bytes.len() < PREAMBLE {
            return bad("file truncated inside the preamble".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
        }
        let header_len = word(8) as usize;
        let Some(header_bytes) = bytes.get(PREAMBLE..PREAMBLE + header_len) else {
            return bad(format!("file truncated inside the {header_len}-byte header"));
        };
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let mut expected_offset = 0u64;
        for e in &header.manifest {
            if e.dtype != "f32" {
                return bad(format!("tensor {} has unsupported dtype {}", e.name, e.dtype));
            }
            if e.offset != expected_offset {
                return bad(format!("tensor {} at offset {} but {} expected", e.name, e.offset, expected_offset));
            }
            expected_offset += e.numel() as u64 * 4;
        }
        let body = &bytes[PREAMBLE + header_len..];
        if body.len() as u64 != expected_offset {
            return bad(format!(
                "payload length mismatch: manifest describes {expected_offset} bytes, file holds {}",
                body.len()
            ));
        }
        let payload = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Checkpoint {
            format_version: version,
            config: header.config,
            manifest: header.manifest,
            provenance: header.provenance,
            payload,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        let e = self.manifest.iter().find(|e| e.name == name)?;
        let start = e.offset as usize / 4;
        Tensor::new(&e.shape, self.payload[start..start + e.numel()].to_vec()).ok()
    }

    /// Rebuilds the graph from the stored config and restores every tensor.
    /// The manifest and the rebuilt graph must name exactly the same
    /// parameters with the same shapes.
    pub fn to_graph<T: Element>(&self) -> Result<ModelGraph<T>> {
        // Initial values are all overwritten below; the seed is irrelevant.
        let mut graph = ModelGraph::<T>::assemble(&self.config, &mut Rng::new(0))?;
        let expected: Vec<String> = graph.named_params().into_iter().map(|(n, _)| n).collect();
        for e in &self.manifest {
            let p = graph
                .param_mut(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest names {} which the rebuilt graph lacks", e.name)))?;
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} but the graph expects {:?}",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            let start = e.offset as usize / 4;
            let values = self.payload[start..start + e.numel()].iter().map(|&v| T::cast_from(v as f64)).collect();
            p.value = Tensor::new(&e.shape, values)?;
        }
        if let Some(missing) = expected.iter().find(|n| !self.manifest.iter().any(|e| &e.name == *n)) {
            return Err(Error::Checkpoint(format!("checkpoint has no tensor for parameter {missing}")));
        }
        Ok(graph)
    }
}

/// Writes the checkpoint atomically: a temporary file in the target
/// directory is renamed over `path` once fully written.
pub fn save_checkpoint<T: Element>(graph: &ModelGraph<T>, path: &Path, provenance: Provenance) -> Result<()> {
    let bytes = Checkpoint::from_graph(graph, provenance).to_bytes()?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ModelGraph<T>> {
    read_checkpoint(path)?.to_graph()
}
