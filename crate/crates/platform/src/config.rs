//! Service configuration: a TOML file overlaid by `EMA_*` environment
//! variables. Command-line flags are applied last by the binary.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_RATE_PER_HOUR: u32 = 60;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {name}: {reason}")]
    Env { name: &'static str, reason: String },
}

/// Cost settings for credential hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct HashCost {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl Default for HashCost {
    fn default() -> Self {
        HashCost {
            memory_kib: argon2::Params::DEFAULT_M_COST,
            iterations: argon2::Params::DEFAULT_T_COST,
            parallelism: argon2::Params::DEFAULT_P_COST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Config {
    pub bind: String,
    /// Stream files (responses, sensor, dispatches).
    pub data_dir: PathBuf,
    /// Participant registry; kept apart from the streams.
    pub registry_dir: PathBuf,
    pub key_store: PathBuf,
    /// Used for keys that do not set their own rate.
    pub rate_default: u32,
    /// Survey definition documents served by the API.
    pub surveys: Vec<PathBuf>,
    pub rules: Option<PathBuf>,
    /// Eligibility predicates; the illustrative default applies when unset.
    pub eligibility: Option<PathBuf>,
    /// When set, notifications are POSTed here instead of only logged.
    pub webhook_url: Option<String>,
    pub credential_hash: HashCost,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: "127.0.0.1:8080".into(),
            data_dir: "data/streams".into(),
            registry_dir: "data/registry".into(),
            key_store: "keys.json".into(),
            rate_default: DEFAULT_RATE_PER_HOUR,
            surveys: Vec::new(),
            rules: None,
            eligibility: None,
            webhook_url: None,
            credential_hash: HashCost::default(),
        }
    }
}

impl Config {
    /// Reads a TOML file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.registry_dir);
        fix(&mut self.key_store);
        self.surveys.iter_mut().for_each(fix);
        self.rules.iter_mut().for_each(fix);
        self.eligibility.iter_mut().for_each(fix);
    }

    /// Loads `path` (or defaults when `None`) and applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut cfg = match path {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(|name| env::var(name).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(
        &mut self,
        get: impl Fn(&'static str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        if let Some(v) = get("EMA_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("EMA_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("EMA_REGISTRY_DIR") {
            self.registry_dir = v.into();
        }
        if let Some(v) = get("EMA_KEY_STORE") {
            self.key_store = v.into();
        }
        if let Some(v) = get("EMA_RATE_DEFAULT") {
            self.rate_default = v.parse().ok().filter(|&r| r > 0).ok_or(ConfigError::Env {
                name: "EMA_RATE_DEFAULT",
                reason: format!("{v:?} is not a positive integer"),
            })?;
        }
        if let Some(v) = get("EMA_WEBHOOK_URL") {
            self.webhook_url = Some(v);
        }
        Ok(())
    }
}
