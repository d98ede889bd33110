//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `IITCKPT1`, the manifest length as a
//! little-endian `u64`, the UTF-8 JSON manifest, then every tensor as
//! little-endian `f64` values in manifest order. Tensor offsets are byte
//! offsets from the start of the blob section.

use std::path::Path;

use descap_core::intervention::InterventionSite;
use descap_core::model::{DualEncoder, LoraConfig, ModelConfig, Tokenizer};
use descap_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

pub const MAGIC: &[u8; 8] = b"IITCKPT1";
const ROTATION: &str = "intervention.rotation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteMeta {
    pub layer: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<SiteMeta>,
    /// The run configuration that produced this checkpoint, verbatim.
    pub run_config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub id: String,
    pub epoch: Option<usize>,
    pub model: DualEncoder,
    pub tokenizer: Tokenizer,
    pub site: Option<InterventionSite>,
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(&str, &Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .collect();
        if let Some(site) = &self.site {
            named.push((ROTATION, &site.rotation));
        }
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            id: self.id.clone(),
            epoch: self.epoch,
            model: self.model.config().clone(),
            lora: self.model.lora().cloned(),
            vocabulary: self.tokenizer.vocabulary().to_vec(),
            site: self.site.as_ref().map(|s| SiteMeta {
                layer: s.layer,
                width: s.width,
            }),
            run_config: self.run_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::data("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::data("checkpoint manifest truncated"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::data(format!("checkpoint manifest: {e}")))?;
        let blobs = &bytes[16 + len..];
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let start = usize::try_from(e.offset).map_err(|_| Error::data("tensor offset overflow"))?;
            let end = start
                .checked_add(8 * n)
                .filter(|&end| end <= blobs.len())
                .ok_or_else(|| Error::data(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Tensor::new(e.shape.clone(), data)?)
        };
        let expected_end = manifest
            .tensors
            .iter()
            .map(|e| e.offset + 8 * e.shape.iter().product::<usize>() as u64)
            .max()
            .unwrap_or(0);
        if expected_end != blobs.len() as u64 {
            return Err(Error::data("checkpoint has trailing or missing tensor data"));
        }
        let mut model = DualEncoder::skeleton(manifest.model.clone(), manifest.lora.clone())?;
        let mut rotation = None;
        let mut seen = std::collections::BTreeSet::new();
        for e in &manifest.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::data(format!("tensor {} listed twice", e.name)));
            }
            let t = read(e)?;
            if e.name == ROTATION {
                rotation = Some(t);
            } else {
                model.load_named(&e.name, t)?;
            }
        }
        if let Some(missing) = model.params().iter().find(|p| !seen.contains(p.name.as_str())) {
            return Err(Error::data(format!("checkpoint lacks tensor {}", missing.name)));
        }
        let site = match (manifest.site, rotation) {
            (None, None) => None,
            (Some(m), Some(rotation)) => {
                let site = InterventionSite {
                    layer: m.layer,
                    width: m.width,
                    rotation,
                };
                site.validate(model.config())?;
                Some(site)
            }
            _ => return Err(Error::data("intervention site metadata and rotation must come together")),
        };
        let tokenizer = Tokenizer::from_vocabulary(manifest.vocabulary);
        if tokenizer.vocab_size() != model.config().vocab_size {
            return Err(Error::data(format!(
                "vocabulary has {} entries but the model expects {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            id: manifest.id,
            epoch: manifest.epoch,
            model,
            tokenizer,
            site,
            run_config: manifest.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}
