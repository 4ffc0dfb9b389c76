//! Service configuration: an optional TOML file, then `LAYOUTDIFF_*`
//! environment overrides.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! data_dir = "./layoutdiff-data"
//! backend = "toy"            # or "http://gpu-host:9000"
//! channels = 4
//! default_steps = 50
//! backend_timeout_secs = 120
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "LAYOUTDIFF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// `toy` for the in-process backend, otherwise the base URL of a
    /// denoiser server.
    pub backend: String,
    pub channels: usize,
    pub default_steps: usize,
    pub backend_timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("layoutdiff-data"),
            backend: "toy".into(),
            channels: 4,
            default_steps: 50,
            backend_timeout_secs: 120,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid value {value:?} for {var}: {message}")]
    Env {
        var: String,
        value: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    /// Reads `path` when given and applies overrides from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with(path, |k| std::env::var(k).ok())
    }

    pub fn load_with(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_owned(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse {
                    path: p.to_owned(),
                    source,
                })?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |name: &str| {
            let var = format!("{ENV_PREFIX}{name}");
            env(&var).map(|v| (var, v))
        };
        fn number<T: std::str::FromStr>((var, value): (String, String)) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: T::Err| ConfigError::Env {
                message: e.to_string(),
                var,
                value,
            })
        }
        if let Some((_, v)) = get("LISTEN") {
            self.listen = v;
        }
        if let Some((_, v)) = get("DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some((_, v)) = get("BACKEND") {
            self.backend = v;
        }
        if let Some(kv) = get("CHANNELS") {
            self.channels = number(kv)?;
        }
        if let Some(kv) = get("DEFAULT_STEPS") {
            self.default_steps = number(kv)?;
        }
        if let Some(kv) = get("BACKEND_TIMEOUT_SECS") {
            self.backend_timeout_secs = number(kv)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels == 0 {
            return Err(ConfigError::Invalid("channels must be at least 1".into()));
        }
        if self.default_steps == 0 {
            return Err(ConfigError::Invalid("default_steps must be at least 1".into()));
        }
        if self.backend_timeout_secs == 0 {
            return Err(ConfigError::Invalid("backend_timeout_secs must be at least 1".into()));
        }
        if !self.uses_toy() && !(self.backend.starts_with("http://") || self.backend.starts_with("https://")) {
            return Err(ConfigError::Invalid(format!(
                "backend must be \"toy\" or an http(s) URL, got {:?}",
                self.backend
            )));
        }
        Ok(())
    }

    pub fn uses_toy(&self) -> bool {
        self.backend == "toy"
    }

    pub fn backend_timeout(&self) -> Duration {
        Duration::from_secs(self.backend_timeout_secs)
    }
}
