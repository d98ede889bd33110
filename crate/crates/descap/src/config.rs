//! The run configuration shared by `pretrain`, `finetune` and friends.

use std::path::{Path, PathBuf};

use descap_core::model::{LoraConfig, ModelConfig};
use descap_core::objectives::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_file;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteConfig {
    /// Defaults to `n_layers - 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Subspace width `k`; defaults to `d_model / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// Data and output locations. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Zero-shot task manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroshot: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_eval: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size` 0 means "size of the tokenizer built at pretraining".
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub site: SiteConfig,
    pub paths: Paths,
    /// Overrides the seeds inside `pretrain` and `train`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            site: SiteConfig::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

/// A parsed config together with the directory its relative paths hang off.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

pub fn parse_config(bytes: &[u8], origin: &str) -> Result<RunConfig> {
    serde_json::from_slice(bytes).map_err(|e| Error::config(format!("{origin}: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = read_file(path).map_err(|e| Error::config(e.message))?;
        let config = parse_config(&bytes, &path.display().to_string())?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    /// Copy the top-level seed into the sub-configs and check ranges.
    pub fn normalized(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.lora.validate()?;
        Ok(self)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolve a required input path and check that it exists.
    pub fn input(&self, name: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::config(format!("paths.{name} is required for this command")))?;
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(Error::config(format!("paths.{name}: {} is not a file", full.display())));
        }
        Ok(full)
    }

    /// Resolve an optional input path, checking it exists when given.
    pub fn optional_input(&self, name: &str, p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
        match p {
            None => Ok(None),
            Some(_) => self.input(name, p).map(Some),
        }
    }

    pub fn checkpoint_dir(&self) -> Result<PathBuf> {
        let p = self
            .config
            .paths
            .checkpoint_dir
            .as_ref()
            .ok_or_else(|| Error::config("paths.checkpoint_dir is required for this command"))?;
        let full = self.resolve(p);
        if full.exists() && !full.is_dir() {
            return Err(Error::config(format!(
                "paths.checkpoint_dir: {} exists and is not a directory",
                full.display()
            )));
        }
        Ok(full)
    }
}
