//! `ihpc.toml`:
//!
//! ```toml
//! root = "/var/tmp/ihpc"
//!
//! [policy]
//! total_cores = 128
//! cap_fraction = "1/8"
//! launch_latency_model = { a = 5.0, b = 0.05 }
//!
//! [[policy.overrides]]
//! user = "ana"
//! cap_cores = 32
//! expiry = 1767225600.0   # Unix seconds
//!
//! [roi]
//! staff_rate = 100.0
//! efficiency = 0.7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roi::DEFAULT_EFFICIENCY;
use crate::sched::PolicyConfig;

pub const ENV_CONFIG: &str = "IHPC_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "ihpc.toml";
pub const DEFAULT_ROOT: &str = ".ihpc";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Invalid { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiDefaults {
    /// Used when a ledger omits `staff_rate`.
    pub staff_rate: Option<f64>,
    /// Used when a ledger omits `efficiency`.
    pub efficiency: f64,
}

impl Default for RoiDefaults {
    fn default() -> Self {
        RoiDefaults {
            staff_rate: None,
            efficiency: DEFAULT_EFFICIENCY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Job storage. Relative paths resolve against the config file's directory.
    pub root: PathBuf,
    pub policy: PolicyConfig,
    pub roi: RoiDefaults,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            root: PathBuf::from(DEFAULT_ROOT),
            policy: PolicyConfig::default(),
            roi: RoiDefaults::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let invalid = |detail: String| ConfigError::Invalid {
            path: path.to_path_buf(),
            detail,
        };
        let mut config: Config = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        config.policy.validate().map_err(|e| invalid(e.to_string()))?;
        let e = config.roi.efficiency;
        if !(e > 0.0 && e <= 1.0) {
            return Err(invalid(format!("roi.efficiency {e} must lie in (0, 1]")));
        }
        if config.root.is_relative() {
            if let Some(dir) = path.parent() {
                config.root = dir.join(&config.root);
            }
        }
        Ok(config)
    }

    /// `explicit`, then `$IHPC_CONFIG`, then `./ihpc.toml`, then defaults.
    /// Returns the file used, if any.
    pub fn discover(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>), ConfigError> {
        if let Some(p) = explicit {
            return Ok((Config::load(p)?, Some(p.to_path_buf())));
        }
        if let Some(p) = std::env::var_os(ENV_CONFIG).filter(|p| !p.is_empty()) {
            let p = PathBuf::from(p);
            return Ok((Config::load(&p)?, Some(p)));
        }
        let local = PathBuf::from(DEFAULT_CONFIG_FILE);
        if local.is_file() {
            return Ok((Config::load(&local)?, Some(local)));
        }
        Ok((Config::default(), None))
    }
}
