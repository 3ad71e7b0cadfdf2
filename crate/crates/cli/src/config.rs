//! Config file: one optional table per command. Command-line flags override
//! file values; file values override built-in defaults.

use std::path::{Path, PathBuf};

use hicra_core::sim::SimConfig;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mine: MineConfig,
    pub classify: ClassifyConfig,
    pub metrics: MetricsConfig,
    pub advantage: AdvantageConfig,
    pub simulate: SimConfig,
    pub judge: JudgeConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub corpus: Option<PathBuf>,
    pub tau: Option<f64>,
    pub quantile: Option<f64>,
    pub n_min: Option<usize>,
    pub n_max: Option<usize>,
    pub min_df: Option<u64>,
    /// JSON object mapping gram surface to vector.
    pub embeddings: Option<PathBuf>,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub corpus: Option<PathBuf>,
    pub sgset: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub corpus: Option<PathBuf>,
    pub sgset: Option<PathBuf>,
    pub key: Option<String>,
    pub follow_words: Option<usize>,
    pub pass_k: Option<Vec<usize>>,
    pub overlap_quantile: Option<f64>,
    pub smooth: Option<usize>,
    pub drop_rho: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub corpus: Option<PathBuf>,
    pub sgset: Option<PathBuf>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub std_normalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub cases: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub timeout_secs: Option<u64>,
    pub cache: Option<PathBuf>,
    pub retries: Option<u32>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub inputs: Vec<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("config: cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("config: {}: {e}", path.display())))
    }
}

/// First present value, or a validation error naming the missing parameter.
pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, Failure> {
    flag.or(file)
        .ok_or_else(|| Failure::Validation(format!("missing required parameter '{name}' (flag or config)")))
}
