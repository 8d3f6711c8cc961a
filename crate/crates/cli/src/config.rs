// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: everything needed to reproduce an artifact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scalewise_core::{ModelConfig, PlanOverrides};
use serde::{Deserialize, Serialize};

/// Key under which artifacts embed the config that produced them.
pub const EMBED_KEY: &str = "run_config";

/// Prompts and paths a command consumes. Unused fields stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alt_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan_overrides: PlanOverrides,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            plan_overrides: PlanOverrides::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    /// Load a bare config or the config embedded in a previous artifact.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(embedded) = value.get_mut(EMBED_KEY) {
            value = embedded.take();
        }
        if !value.is_object() {
            bail!("config {} is not a JSON object", path.display());
        }
        serde_json::from_value(value).with_context(|| format!("parsing config {}", path.display()))
    }
}
