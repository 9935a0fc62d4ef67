//! TOML configuration. Every key is optional; command-line flags win over
//! file values.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! manifest = "data/manifest.jsonl"
//! out = "runs/tiny"
//!
//! [model]
//! preset = "tiny"
//!
//! [train]
//! batch_size = 32
//! strategy = "oversample"
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use fracvit::dec::{DecConfig, PretrainConfig};
use fracvit::train::TrainConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "tiny".into() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Autoencoder widths after the feature width, ending at the latent width.
    pub widths: Vec<usize>,
    pub restarts: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { widths: vec![32, 10], restarts: 10 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub washout_secs: u64,
    pub cases: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), washout_secs: 0, cases: 150 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub dec: DecConfig,
    pub cluster: ClusterSection,
    pub serve: ServeSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
