use std::path::{Path, PathBuf};

use serde::Deserialize;

use sigtraj::harness::RunConfig;
use sigtraj::metrics::DetectorConfig;
use sigtraj::model::{ModelConfig, TrainConfig};

/// Marks errors caused by the invocation or its input files (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Environment variable naming the directory searched for default documents.
pub const CONFIG_DIR_VAR: &str = "SIGTRAJ_CONFIG_DIR";

/// Settings document. Every table is optional.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub detectors: DetectorConfig,
    /// Grid steps between training or evaluation window anchors.
    pub stride: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
            detectors: DetectorConfig::default(),
            stride: 1,
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let s: Settings = toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        if s.stride == 0 {
            return Err(ConfigError(format!("{}: stride must be positive", path.display())));
        }
        Ok(s)
    }
}

/// An explicit path, else `name` inside the config directory when present.
pub fn resolve(explicit: Option<&Path>, name: &str) -> Result<Option<PathBuf>, ConfigError> {
    if let Some(p) = explicit {
        return Ok(Some(p.to_path_buf()));
    }
    match std::env::var_os(CONFIG_DIR_VAR) {
        Some(dir) => {
            let p = Path::new(&dir).join(name);
            Ok(p.is_file().then_some(p))
        }
        None => Ok(None),
    }
}

pub fn read_config(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}
