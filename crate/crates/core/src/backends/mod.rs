//! Model backends: speech recognition, LLM completion, speech synthesis and
//! text embedding.
//!
//! Each role is a trait with two implementations: a deterministic mock that
//! runs offline and an HTTP client speaking the usual OpenAI-style routes.
//! Backends are `Send + Sync` and safe to call concurrently.

mod embed;
mod http;
mod mock;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

pub use embed::{Embedding, TrigramEmbedder, EMBEDDING_DIM};
pub use http::{HttpAsr, HttpEmbedder, HttpLlm, HttpTts};
pub use mock::{MockAsr, MockLlm, MockTts, MOCK_TTS_RATE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend} unavailable: {detail}")]
    Unavailable { backend: String, detail: String },
    #[error("backend {backend} rejected the request with status {status}: {body}")]
    Rejected { backend: String, status: u16, body: String },
    #[error("backend {backend} returned an empty completion")]
    EmptyCompletion { backend: String },
    #[error("mock backend has no fixture for clip {clip_hash}")]
    MockFixtureMissing { clip_hash: String },
    #[error("backend {backend} returned audio that could not be decoded: {detail}")]
    UnsupportedAudioResponse { backend: String, detail: String },
    #[error("backend {backend} returned an unexpected response: {detail}")]
    BadResponse { backend: String, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Unavailable { .. } => "BackendUnavailable",
            BackendError::Rejected { .. } => "BackendRejected",
            BackendError::EmptyCompletion { .. } => "EmptyCompletion",
            BackendError::MockFixtureMissing { .. } => "MockFixtureMissing",
            BackendError::UnsupportedAudioResponse { .. } => "UnsupportedAudioResponse",
            BackendError::BadResponse { .. } => "BadResponse",
            BackendError::InvalidRequest(_) => "InvalidRequest",
            BackendError::Config(_) => "ConfigInvalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    pub backend_id: String,
    pub latency_s: f64,
}

/// Free-text speaking style handed to the synthesiser.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleSpec {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voice_id: Option<String>,
}

impl Default for StyleSpec {
    fn default() -> Self {
        Self { description: "clear, calm, natural voice".into(), voice_id: None }
    }
}

impl StyleSpec {
    pub fn new(description: impl Into<String>) -> Result<Self, BackendError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(BackendError::InvalidRequest("style description must not be empty".into()));
        }
        Ok(Self { description, voice_id: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 256 }
    }
}

/// Reachability summary for the health endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub id: String,
    pub kind: BackendKind,
    pub reachable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub trait Asr: Send + Sync {
    fn id(&self) -> &str;
    fn transcribe(&self, clip: &AudioClip) -> Result<Transcript, BackendError>;
    fn health(&self) -> BackendHealth;
}

pub trait Llm: Send + Sync {
    fn id(&self) -> &str;
    /// Raw completion text with surrounding whitespace removed.
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError>;
    fn health(&self) -> BackendHealth;
}

pub trait Tts: Send + Sync {
    fn id(&self) -> &str;
    fn synthesize(&self, text: &str, style: &StyleSpec) -> Result<AudioClip, BackendError>;
    fn health(&self) -> BackendHealth;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Embedding, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Connection settings for one backend role.
///
/// The API key itself is never stored; only the name of the environment
/// variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub max_retries: u32,
    /// Default voice for speech synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voice: Option<String>,
    /// Artificial latency added by mock backends, for profiling drills.
    #[serde(default)]
    pub delay_s: f64,
}

fn default_timeout() -> f64 {
    30.0
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::mock()
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            id: None,
            base_url: None,
            api_key_env: None,
            model_name: None,
            timeout_s: default_timeout(),
            max_retries: 0,
            voice: None,
            delay_s: 0.0,
        }
    }

    pub fn mock_with_delay(delay_s: f64) -> Self {
        Self { delay_s, ..Self::mock() }
    }

    pub fn http(base_url: impl Into<String>) -> Self {
        Self { kind: BackendKind::Http, base_url: Some(base_url.into()), ..Self::mock() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(BackendError::Config(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        if !(self.delay_s >= 0.0 && self.delay_s.is_finite()) {
            return Err(BackendError::Config(format!("delay_s must be non-negative, got {}", self.delay_s)));
        }
        if self.kind == BackendKind::Http {
            let url = self
                .base_url
                .as_deref()
                .ok_or_else(|| BackendError::Config("http backends require base_url".into()))?;
            reqwest::Url::parse(url).map_err(|e| BackendError::Config(format!("base_url {url:?}: {e}")))?;
        }
        Ok(())
    }

    pub(crate) fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub(crate) fn delay(&self) -> Option<Duration> {
        (self.delay_s > 0.0).then(|| Duration::from_secs_f64(self.delay_s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub asr: BackendConfig,
    #[serde(default)]
    pub llm: BackendConfig,
    #[serde(default)]
    pub tts: BackendConfig,
    #[serde(default)]
    pub embedder: BackendConfig,
}

/// One backend per role, shareable across threads.
#[derive(Clone)]
pub struct Backends {
    pub asr: Arc<dyn Asr>,
    pub llm: Arc<dyn Llm>,
    pub tts: Arc<dyn Tts>,
    pub embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("asr", &self.asr.id())
            .field("llm", &self.llm.id())
            .field("tts", &self.tts.id())
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl Backends {
    /// All-mock stack with no artificial delays.
    pub fn mock() -> Self {
        Self {
            asr: Arc::new(MockAsr::new()),
            llm: Arc::new(MockLlm::new()),
            tts: Arc::new(MockTts::new()),
            embedder: Arc::new(TrigramEmbedder),
        }
    }

    /// Builds clients from configuration. HTTP clients are blocking; do not
    /// call this from inside an async executor thread.
    pub fn from_config(cfg: &BackendsConfig) -> Result<Self, BackendError> {
        for c in [&cfg.asr, &cfg.llm, &cfg.tts, &cfg.embedder] {
            c.validate()?;
        }
        let asr: Arc<dyn Asr> = match cfg.asr.kind {
            BackendKind::Mock => Arc::new(MockAsr::from_config(&cfg.asr)),
            BackendKind::Http => Arc::new(HttpAsr::new(&cfg.asr)?),
        };
        let llm: Arc<dyn Llm> = match cfg.llm.kind {
            BackendKind::Mock => Arc::new(MockLlm::from_config(&cfg.llm)),
            BackendKind::Http => Arc::new(HttpLlm::new(&cfg.llm)?),
        };
        let tts: Arc<dyn Tts> = match cfg.tts.kind {
            BackendKind::Mock => Arc::new(MockTts::from_config(&cfg.tts)),
            BackendKind::Http => Arc::new(HttpTts::new(&cfg.tts)?),
        };
        let embedder: Arc<dyn Embedder> = match cfg.embedder.kind {
            BackendKind::Mock => Arc::new(TrigramEmbedder),
            BackendKind::Http => Arc::new(HttpEmbedder::new(&cfg.embedder)?),
        };
        Ok(Self { asr, llm, tts, embedder })
    }

    pub fn health(&self) -> Vec<(&'static str, BackendHealth)> {
        vec![("asr", self.asr.health()), ("llm", self.llm.health()), ("tts", self.tts.health())]
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BackendConfig::mock().validate().is_ok());
        let no_url = BackendConfig { kind: BackendKind::Http, ..BackendConfig::mock() };
        assert!(matches!(no_url.validate(), Err(BackendError::Config(_))));
        let bad_timeout = BackendConfig { timeout_s: 0.0, ..BackendConfig::mock() };
        assert!(bad_timeout.validate().is_err());
        assert!(BackendConfig::http("not a url").validate().is_err());
        assert!(BackendConfig::http("http://127.0.0.1:9/v1").validate().is_ok());
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: BackendsConfig = serde_json::from_str(
            r#"{"llm": {"kind": "http", "base_url": "http://localhost:8000/v1", "api_key_env": "OPENAI_API_KEY", "model_name": "gpt-4.1"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.asr.kind, BackendKind::Mock);
        assert_eq!(cfg.llm.kind, BackendKind::Http);
        assert_eq!(cfg.llm.timeout_s, 30.0);
        assert_eq!(cfg.llm.max_retries, 0);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn style_requires_description() {
        assert!(StyleSpec::new("  ").is_err());
        assert_eq!(StyleSpec::new("calm female voice").unwrap().description, "calm female voice");
    }
}
