use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// A linear map inside a transformer block that may carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

impl LoraTarget {
    pub const ATTENTION: [LoraTarget; 4] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
    ];
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
        LoraTarget::MlpIn,
        LoraTarget::MlpOut,
    ];

    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

/// Low-rank adapter settings. The adapted map computes `xW + (x·down)·up`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            dropout: 0.0,
            targets: LoraTarget::ATTENTION.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("LoRA rank must be at least 1"));
        }
        if self.targets.is_empty() {
            return Err(config_err("LoRA needs at least one target projection"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err("LoRA dropout must lie in [0, 1)"));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(config_err("duplicate LoRA target"));
        }
        Ok(())
    }
}
