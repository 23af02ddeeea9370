//! The run configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moesim_core::compress::CompressionConfig;
use moesim_core::pipeline::SimConfig;
use moesim_core::predict::TrainConfig;
use moesim_core::presets::Preset;
use moesim_core::trace::TraceGenConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Input locations. Unset inputs default to the artifact of the same name in
/// the output directory, so commands chain without extra flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub trace: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            trace: None,
            plan: None,
            model: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Model geometry; overrides the geometry fields of `trace` and `sim`.
    pub preset: Preset,
    /// Retention policy name: affinity, saliency, random or none.
    pub retention: String,
    /// Requests to the same model generated as predictor training data.
    pub profiling_requests: usize,
    /// Coverage K of the affinity report.
    pub coverage_k: usize,
    pub paths: Paths,
    pub trace: TraceGenConfig,
    pub compression: CompressionConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: Preset::Custom,
            retention: "affinity".to_string(),
            profiling_requests: 12,
            coverage_k: 8,
            paths: Paths::default(),
            trace: TraceGenConfig::default(),
            compression: CompressionConfig::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

/// A config file that parses as neither valid TOML nor a valid schema.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config {}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(ConfigError {
                path: path.display().to_string(),
                message: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    cfg.schema_version
                ),
            });
        }
        Ok(cfg)
    }

    /// Expands the preset and applies command-line overrides.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        self.preset.apply(&mut self.trace, &mut self.sim);
        if let Some(s) = seed {
            self.trace.seed = s;
            self.train.seed = s;
            self.sim.seed = s;
            self.sim.predictor.seed = s;
        }
        if let Some(dir) = out {
            self.paths.out_dir = dir;
        }
        self
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn trace_path(&self) -> PathBuf {
        self.paths.trace.clone().unwrap_or_else(|| self.out("trace.jsonl"))
    }

    pub fn plan_path(&self) -> PathBuf {
        self.paths.plan.clone().unwrap_or_else(|| self.out("plan.json"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths.model.clone().unwrap_or_else(|| self.out("model.json"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_are_partial() {
        let cfg: RunConfig = toml::from_str("preset = \"qwen\"\n[sim]\nbandwidth = 10.0\n").unwrap();
        assert_eq!(cfg.sim.bandwidth, 10.0);
        assert_eq!(cfg.sim.expert_size, SimConfig::default().expert_size);
        let cfg = cfg.resolve(Some(7), None);
        assert_eq!(
            (cfg.trace.num_experts, cfg.trace.seed, cfg.sim.expert_size),
            (128, 7, 17.3)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[sim]\nbandwith = 1.0\n").is_err());
    }
}
