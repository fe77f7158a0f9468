use std::fmt;
use std::path::{Path, PathBuf};

use feallm_core::training::{ModelConfig, Stage, StageConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A bad or missing configuration value (exit code 4).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Target eval-split size in records; defaults to a fifth of the
    /// validated records.
    pub eval_count: Option<usize>,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    /// Question-template bank; the bundled bank when unset.
    pub templates: Option<PathBuf>,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            eval_count: None,
            retry_attempts: 3,
            retry_base_ms: 500,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub max_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { max_tokens: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionSettings {
    pub count: usize,
    pub side: usize,
}

impl Default for CaptionSettings {
    fn default() -> Self {
        Self { count: 16, side: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: Option<StageConfig>,
    pub stage2: Option<StageConfig>,
    pub dataset: DatasetSettings,
    pub evaluate: EvalSettings,
    pub captions: CaptionSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::tiny(),
            stage1: None,
            stage2: None,
            dataset: DatasetSettings::default(),
            evaluate: EvalSettings::default(),
            captions: CaptionSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        for stage in [&cfg.stage1, &cfg.stage2].into_iter().flatten() {
            stage.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// The configured schedule for a stage, or the stage's defaults.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let configured = match stage {
            Stage::Pretrain => &self.stage1,
            Stage::Finetune => &self.stage2,
        };
        let mut cfg = configured.clone().unwrap_or_else(|| StageConfig::for_stage(stage));
        cfg.stage = stage;
        cfg
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn meta(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "config_hash": self.hash(),
            "seed": self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_override_changes_hash() {
        let a = RunConfig::load(None, Some(1)).unwrap();
        let b = RunConfig::load(None, Some(2)).unwrap();
        assert_eq!(a.hash(), RunConfig::load(None, Some(1)).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        let cfg: RunConfig = toml::from_str("seed = 3\n[evaluate]\nmax_tokens = 5").unwrap();
        assert_eq!(cfg.evaluate.max_tokens, 5);
    }
}
