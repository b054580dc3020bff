use std::path::{Path, PathBuf};

use ecgx_exchange::DavConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid configuration file: {0}")]
    Toml(String),
    #[error("environment variable {var}={value:?} is invalid")]
    BadEnv { var: &'static str, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeConfig {
    pub url: String,
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub pass: Option<String>,
}

impl ExchangeConfig {
    pub fn dav(&self) -> DavConfig {
        DavConfig { url: self.url.clone(), user: self.user.clone(), pass: self.pass.clone(), timeout_secs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: String,
    pub port: u16,
    pub max_upload_mb: u64,
    /// Fine-tune worker threads.
    pub workers: usize,
    pub exchange: Option<ExchangeConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("ecgx-data"),
            bind: "127.0.0.1".into(),
            port: 8080,
            max_upload_mb: 64,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            exchange: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.into(), message: e.to_string() })?;
                Self::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `DATA_DIR`, `PORT`, `EXCHANGE_URL`, `EXCHANGE_USER`, `EXCHANGE_PASS`,
    /// `MAX_UPLOAD_MB` and `WORKERS` as looked up by `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(var: &'static str, v: String) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError::BadEnv { var, value: v })
        }
        if let Some(v) = get("DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("PORT") {
            self.port = num("PORT", v)?;
        }
        if let Some(v) = get("MAX_UPLOAD_MB") {
            self.max_upload_mb = num("MAX_UPLOAD_MB", v)?;
        }
        if let Some(v) = get("WORKERS") {
            self.workers = num("WORKERS", v)?;
        }
        if let Some(url) = get("EXCHANGE_URL") {
            let ex = self.exchange.get_or_insert(ExchangeConfig { url: String::new(), user: None, pass: None });
            ex.url = url;
        }
        for (var, slot) in [("EXCHANGE_USER", 0), ("EXCHANGE_PASS", 1)] {
            if let Some(v) = get(var) {
                let ex = self.exchange.as_mut().ok_or(ConfigError::Invalid(format!("{var} is set without an exchange url")))?;
                if slot == 0 {
                    ex.user = Some(v);
                } else {
                    ex.pass = Some(v);
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.max_upload_mb == 0 {
            return Err(ConfigError::Invalid("max_upload_mb must be at least 1".into()));
        }
        if self.exchange.as_ref().is_some_and(|e| e.url.is_empty()) {
            return Err(ConfigError::Invalid("exchange url is empty".into()));
        }
        Ok(())
    }

    pub fn upload_limit_bytes(&self) -> usize {
        usize::try_from(self.max_upload_mb.saturating_mul(1 << 20)).unwrap_or(usize::MAX)
    }
}
