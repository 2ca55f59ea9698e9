//! Checkpoint files.
//!
//! Layout: `u32` little-endian header length, the JSON header, then one record
//! per tensor in header order: `u32` name length, UTF-8 name, `u32` element
//! count, little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::models::{DuetNet, ModelConfig, ModelKind, MASK_ID};
use crate::score::{Scheme, Vocabulary};
use crate::tensor::{Init, Params, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub scheme: Scheme,
    /// Input vocabulary labels (span models append `MASK`).
    pub vocab: Vec<String>,
    pub config: ModelConfig,
    pub layers: Vec<LayerShape>,
    pub rng_seed: u64,
    #[serde(default)]
    pub training: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: DuetNet<f32>,
}

fn input_labels(kind: ModelKind) -> Vec<String> {
    let scheme = kind.view().scheme();
    let mut labels = Vocabulary::new(scheme).labels().to_vec();
    if kind.view().is_span() {
        debug_assert_eq!(labels.len(), MASK_ID);
        labels.push("MASK".to_string());
    }
    labels
}

impl Checkpoint {
    pub fn new(net: DuetNet<f32>, rng_seed: u64) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: net.kind,
            scheme: net.kind.view().scheme(),
            vocab: input_labels(net.kind),
            config: net.config,
            layers: net
                .params
                .entries()
                .iter()
                .map(|e| LayerShape {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
            rng_seed,
            training: BTreeMap::new(),
        };
        Checkpoint { header, net }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.header.training.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serializable"),
        );
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let mut out = Vec::with_capacity(header.len() + 4 * self.net.params.num_scalars() + 64);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.net.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.tensor.len() as u32).to_le_bytes());
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or(CheckpointError::Truncated(pos))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let hlen = u32_at(take(4)?);
        let header: CheckpointHeader = serde_json::from_slice(take(hlen)?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let mut params = Params::new();
        for layer in &header.layers {
            let nlen = u32_at(take(4)?);
            let name = std::str::from_utf8(take(nlen)?)
                .map_err(|e| CheckpointError::Header(e.to_string()))?
                .to_string();
            if name != layer.name {
                return Err(CheckpointError::Header(format!(
                    "tensor {name} out of order, expected {}",
                    layer.name
                )));
            }
            let count = u32_at(take(4)?);
            if count != layer.shape.iter().product::<usize>() {
                return Err(CheckpointError::Header(format!(
                    "tensor {name} size mismatch"
                )));
            }
            let raw = take(4 * count)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(&name, Tensor::new(layer.shape.clone(), data), Init::Zeros);
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        let net = DuetNet::from_params(header.kind, header.config, params)
            .map_err(CheckpointError::Header)?;
        Ok(Checkpoint { header, net })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        if let Some(dir) = path.as_ref().parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
