//! TOML run configuration. Every section is optional and falls back to the
//! desk-scale defaults; command-line flags override file values.

use std::path::Path;

use anyhow::Context;
use capsule_core::data::SyntheticSpec;
use capsule_core::model::ModelConfig;
use capsule_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Read the disjoint split variant.
    pub disjoint: bool,
    /// Truncation length on load; the model's `max_outfit_len` when unset.
    pub max_outfit_len: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
