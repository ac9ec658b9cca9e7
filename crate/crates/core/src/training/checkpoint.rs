//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   MAGIC
//! version      u32 LE    FORMAT_VERSION
//! header_len   u64 LE
//! header       JSON      config, tensor names and shapes, vocabulary, labels
//! payload      f64 LE    every tensor, row-major, in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig, ModelParams};
use crate::numkernel::{Matrix, SeededRng};

pub const MAGIC: [u8; 8] = *b"GDCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocabulary: Vec<String>,
    labels: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A model together with what is needed to encode its inputs and name its
/// outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Classifier,
    /// Token strings indexed by id.
    pub vocabulary: Vec<String>,
    /// Class names indexed by class.
    pub labels: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Classifier, vocabulary: Vec<String>, labels: Vec<String>) -> Self {
        Checkpoint { model, vocabulary, labels, metadata: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.params.named();
        let header = Header {
            config: self.model.config.clone(),
            tensors: named.iter().map(|(name, m)| TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()] }).collect(),
            vocabulary: self.vocabulary.clone(),
            labels: self.labels.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let payload: usize = named.iter().map(|(_, m)| m.data().len() * 8).sum();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in named {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint whose tensors must match its own stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    /// Parses a checkpoint whose tensors must match `expected`.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        Self::parse(bytes, Some(expected))
    }

    fn parse(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Format("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| PREAMBLE.checked_add(h))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::Format(format!("header: {e}")))?;

        let config = expected.cloned().unwrap_or_else(|| header.config.clone());
        config.validate()?;
        let mut params = ModelParams::init(&config, &mut SeededRng::new(0));
        let template = params.named();
        if template.len() != header.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, header lists {}", template.len(), header.tensors.len())));
        }
        for ((name, m), entry) in template.iter().zip(&header.tensors) {
            if *name != entry.name {
                return Err(Error::Format(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            let found = (entry.shape[0], entry.shape[1]);
            if found != m.shape() {
                return Err(Error::TensorShape { name: name.clone(), found, expected: m.shape() });
            }
        }

        let payload = &bytes[header_end..];
        let needed: usize = template.iter().map(|(_, m)| m.data().len() * 8).sum();
        if payload.len() < needed {
            return Err(Error::Format(format!("truncated payload: {} of {needed} bytes", payload.len())));
        }
        if payload.len() > needed {
            return Err(Error::Format(format!("{} trailing bytes", payload.len() - needed)));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let tensors: Vec<Matrix> = template
            .iter()
            .map(|(_, m)| Matrix::from_vec(m.rows(), m.cols(), chunks.by_ref().take(m.data().len()).collect()))
            .collect::<Result<_>>()?;
        params.set_tensors(tensors)?;
        Ok(Checkpoint {
            model: Classifier { config, params },
            vocabulary: header.vocabulary,
            labels: header.labels,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes_expecting(&std::fs::read(path).map_err(|e| Error::io(path, e))?, expected)
    }
}
