//! Service configuration: a JSON file with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::DspConfig;
use crate::backends::{BackendsConfig, CompletionParams, StyleSpec};

pub const ENV_LISTEN: &str = "SPEECH_REFINE_LISTEN";
pub const ENV_MODEL_PATH: &str = "SPEECH_REFINE_MODEL_PATH";
pub const ENV_SESSION_DIR: &str = "SPEECH_REFINE_SESSION_DIR";
pub const ENV_PROMPTS_DIR: &str = "SPEECH_REFINE_PROMPTS_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Trained classifier; the server refuses to start without one.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// Session directory; sessions stay in memory when unset.
    #[serde(default)]
    pub session_dir: Option<PathBuf>,
    /// Replacement prompt templates, same file names as the built-ins.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub dsp: DspConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub llm_params: CompletionParams,
    #[serde(default)]
    pub default_style: StyleSpec,
    /// Name of an environment variable holding a static bearer token that
    /// clients must present. Open access when unset.
    #[serde(default)]
    pub api_token_env: Option<String>,
    #[serde(default = "default_body_limit")]
    pub max_upload_bytes: usize,
    #[serde(default = "default_origins")]
    pub cors_origins: Vec<String>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_body_limit() -> usize {
    32 * 1024 * 1024
}

fn default_origins() -> Vec<String> {
    vec!["*".into()]
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            model_path: None,
            session_dir: None,
            prompts_dir: None,
            dsp: DspConfig::default(),
            backends: BackendsConfig::default(),
            llm_params: CompletionParams::default(),
            default_style: StyleSpec::default(),
            api_token_env: None,
            max_upload_bytes: default_body_limit(),
            cors_origins: default_origins(),
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (or starts from defaults) and applies process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_overrides(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = lookup(ENV_MODEL_PATH) {
            self.model_path = Some(v.into());
        }
        if let Some(v) = lookup(ENV_SESSION_DIR) {
            self.session_dir = Some(v.into());
        }
        if let Some(v) = lookup(ENV_PROMPTS_DIR) {
            self.prompts_dir = Some(v.into());
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dsp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for b in [&self.backends.asr, &self.backends.llm, &self.backends.tts, &self.backends.embedder] {
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.default_style.description.trim().is_empty() {
            return Err(ConfigError::Invalid("default_style.description must not be empty".into()));
        }
        if self.max_upload_bytes == 0 {
            return Err(ConfigError::Invalid("max_upload_bytes must be positive".into()));
        }
        Ok(())
    }

    /// The bearer token clients must send, if one is configured.
    pub fn api_token(&self) -> Option<String> {
        let name = self.api_token_env.as_deref()?;
        std::env::var(name).ok().filter(|t| !t.is_empty())
    }
}
