use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dosegraph::graph::DEFAULT_THRESHOLD;
use dosegraph::model::{ModelConfig, DOSEGNN};
use dosegraph::train::TrainConfig;

/// Training and cross-validation settings read from TOML.
///
/// ```toml
/// model = "dosegnn"
/// threshold = 0.3
/// seed = 0
/// [network]
/// hidden = 32
/// [training]
/// max_epochs = 200
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub threshold: f64,
    pub seed: u64,
    pub embed_url: Option<String>,
    pub network: ModelConfig,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DOSEGNN.to_string(),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            embed_url: None,
            network: ModelConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub checkpoint: Option<PathBuf>,
    /// Directory of case bundles offered by `GET /cases`.
    pub data: Option<PathBuf>,
    pub embed_url: Option<String>,
    pub embed_timeout_ms: u64,
    /// Must agree with the checkpoint when given.
    pub prompt_width: Option<usize>,
    pub threshold: f64,
    /// Append-only session journal, replayed at startup.
    pub journal: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            checkpoint: None,
            data: None,
            embed_url: None,
            embed_timeout_ms: 2000,
            prompt_width: None,
            threshold: DEFAULT_THRESHOLD,
            journal: None,
        }
    }
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
