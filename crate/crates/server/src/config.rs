//! Service configuration: one TOML or JSON file, then environment overrides
//! (`PULSE_ADDR`, `PULSE_DATA_DIR`, `PULSE_TOKENS_FILE`).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use geoloop_core::geo::Resampling;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    /// File mapping bearer tokens to user names.
    pub tokens_file: Option<PathBuf>,
    /// Inline tokens, merged with `tokens_file`.
    pub tokens: BTreeMap<String, String>,
    /// In-process reference workers started with the service.
    pub workers: usize,
    pub heartbeat_interval_ms: u64,
    pub heartbeat_timeout_ms: u64,
    pub sweep_interval_ms: u64,
    pub max_attempts: u32,
    pub max_upload_bytes: usize,
    pub resampling: Resampling,
    /// fsync every commit.
    pub sync_writes: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".parse().unwrap(),
            data_dir: PathBuf::from("data"),
            tokens_file: None,
            tokens: BTreeMap::new(),
            workers: 1,
            heartbeat_interval_ms: 10_000,
            heartbeat_timeout_ms: 30_000,
            sweep_interval_ms: 1_000,
            max_attempts: geoloop_core::jobs::DEFAULT_MAX_ATTEMPTS,
            max_upload_bytes: 512 * 1024 * 1024,
            resampling: Resampling::Bilinear,
            sync_writes: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokensFile {
    tokens: BTreeMap<String, String>,
}

fn parse_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
    }
}

impl Config {
    /// Reads `path` (if any) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut cfg = match path {
            Some(p) => parse_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(a) = get("PULSE_ADDR") {
            self.addr = a
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("PULSE_ADDR={a:?}: {e}")))?;
        }
        if let Some(d) = get("PULSE_DATA_DIR") {
            self.data_dir = PathBuf::from(d);
        }
        if let Some(t) = get("PULSE_TOKENS_FILE") {
            self.tokens_file = Some(PathBuf::from(t));
        }
        Ok(())
    }

    /// Inline tokens plus those of `tokens_file`.
    pub fn resolve_tokens(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut tokens = self.tokens.clone();
        if let Some(p) = &self.tokens_file {
            let file: TokensFile = parse_file(p)?;
            tokens.extend(file.tokens);
        }
        if tokens.is_empty() {
            return Err(ConfigError::Invalid("no access tokens configured".into()));
        }
        Ok(tokens)
    }

    pub fn heartbeat_interval(&self) -> Duration {
        Duration::from_millis(self.heartbeat_interval_ms)
    }

    pub fn heartbeat_timeout(&self) -> Duration {
        Duration::from_millis(self.heartbeat_timeout_ms)
    }

    pub fn sweep_interval(&self) -> Duration {
        Duration::from_millis(self.sweep_interval_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_file_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("pulse.toml");
        let tokens_path = dir.path().join("tokens.toml");
        std::fs::write(&tokens_path, "[tokens]\nt-alice = \"alice\"\n").unwrap();
        std::fs::write(
            &cfg_path,
            "addr = \"0.0.0.0:9000\"\nworkers = 2\nheartbeat_timeout_ms = 500\n[tokens]\nt-bob = \"bob\"\n",
        )
        .unwrap();
        let mut cfg: Config = parse_file(&cfg_path).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.heartbeat_interval_ms, 10_000);
        let env: BTreeMap<&str, String> = [
            ("PULSE_ADDR", "127.0.0.1:7000".to_string()),
            ("PULSE_DATA_DIR", "/tmp/x".to_string()),
            ("PULSE_TOKENS_FILE", tokens_path.display().to_string()),
        ]
        .into();
        cfg.apply_env(|k| env.get(k).cloned()).unwrap();
        assert_eq!(cfg.addr.port(), 7000);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        let tokens = cfg.resolve_tokens().unwrap();
        assert_eq!(tokens["t-alice"], "alice");
        assert_eq!(tokens["t-bob"], "bob");
    }

    #[test]
    fn json_config_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pulse.json");
        std::fs::write(&p, r#"{"workers": 0, "tokens": {"x": "y"}}"#).unwrap();
        let cfg: Config = parse_file(&p).unwrap();
        assert_eq!(cfg.workers, 0);
        std::fs::write(&p, r#"{"wrokers": 0}"#).unwrap();
        assert!(parse_file::<Config>(&p).is_err());
        assert!(Config::default().resolve_tokens().is_err());
    }
}
