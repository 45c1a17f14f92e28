//! Experiment configuration files.
//!
//! A TOML document with a `[benchmark]` table (every [`BenchmarkSpec`]
//! field), a `[train]` table (every [`TrainConfig`] field) and an optional
//! top-level `seeds` list. Missing keys take their defaults; unknown keys are
//! rejected.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//!
//! [benchmark]
//! domain_transform_scale = 0.5
//!
//! [train]
//! arm = "tdg"
//! lambda = 0.3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BenchmarkSpec;
use crate::error::{Result, TdgError};
use crate::experiments::DEFAULT_SEEDS;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            benchmark: BenchmarkSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TdgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TdgError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TdgError::Config("seeds must not be empty".into()));
        }
        self.benchmark
            .validate()
            .map_err(|e| TdgError::Config(e.to_string()))?;
        self.train.validate()
    }
}

/// Reads a bare [`BenchmarkSpec`] table (no section headers).
pub fn load_spec(path: &Path) -> Result<BenchmarkSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: BenchmarkSpec = toml::from_str(&text).map_err(|e| TdgError::Config(e.to_string()))?;
    spec.validate().map_err(|e| TdgError::Config(e.to_string()))?;
    Ok(spec)
}
