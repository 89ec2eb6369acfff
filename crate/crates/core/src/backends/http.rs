//! Blocking HTTP clients for OpenAI-style endpoints.
//!
//! Requests are retried only when the connection fails or times out; any
//! HTTP status response, including 4xx and 5xx, is final.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use reqwest::blocking::{multipart, Client, RequestBuilder, Response};
use serde_json::{json, Value};

use super::{
    Asr, BackendConfig, BackendError, BackendHealth, BackendKind, CompletionParams, Embedder, Embedding, Llm,
    StyleSpec, Transcript, Tts,
};
use crate::audio::{load_wav, write_wav, AudioClip};

#[derive(Debug, Clone)]
struct HttpClient {
    id: String,
    base_url: String,
    api_key_env: Option<String>,
    model_name: Option<String>,
    timeout: Duration,
    max_retries: u32,
    client: Client,
}

impl HttpClient {
    fn new(cfg: &BackendConfig, default_id: &str) -> Result<Self, BackendError> {
        cfg.validate()?;
        let base_url = cfg.base_url.clone().expect("validated").trim_end_matches('/').to_string();
        let client = Client::builder()
            .timeout(cfg.timeout())
            .connect_timeout(cfg.timeout())
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            id: cfg.id.clone().unwrap_or_else(|| match &cfg.model_name {
                Some(m) => format!("{default_id}:{m}"),
                None => default_id.to_string(),
            }),
            base_url,
            api_key_env: cfg.api_key_env.clone(),
            model_name: cfg.model_name.clone(),
            timeout: cfg.timeout(),
            max_retries: cfg.max_retries,
            client,
        })
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.base_url, route)
    }

    fn authorize(&self, req: RequestBuilder) -> RequestBuilder {
        match self.api_key_env.as_deref().and_then(|name| std::env::var(name).ok()) {
            Some(key) if !key.is_empty() => req.bearer_auth(key),
            _ => req,
        }
    }

    fn send(&self, build: impl Fn(&Client) -> RequestBuilder) -> Result<Response, BackendError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match self.authorize(build(&self.client)).send() {
                Ok(resp) if resp.status().is_success() => return Ok(resp),
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let body = resp.text().unwrap_or_default();
                    return Err(BackendError::Rejected { backend: self.id.clone(), status, body });
                }
                Err(e) if e.is_connect() || e.is_timeout() => {
                    tracing::warn!(backend = %self.id, attempt, "backend request failed, retrying if allowed");
                    last = describe(e);
                }
                Err(e) => return Err(BackendError::Unavailable { backend: self.id.clone(), detail: describe(e) }),
            }
        }
        Err(BackendError::Unavailable {
            backend: self.id.clone(),
            detail: format!("{last} (after {} attempt(s))", self.max_retries + 1),
        })
    }

    fn json(&self, resp: Response) -> Result<Value, BackendError> {
        resp.json::<Value>()
            .map_err(|e| BackendError::BadResponse { backend: self.id.clone(), detail: describe(e) })
    }

    fn bad(&self, detail: impl Into<String>) -> BackendError {
        BackendError::BadResponse { backend: self.id.clone(), detail: detail.into() }
    }

    fn health(&self) -> BackendHealth {
        let probe = reqwest::Url::parse(&self.base_url).ok().and_then(|url| {
            let host = url.host_str()?.to_string();
            let port = url.port_or_known_default()?;
            (host, port).to_socket_addrs().ok()?.next()
        });
        let (reachable, detail) = match probe {
            Some(addr) => match TcpStream::connect_timeout(&addr, self.timeout.min(Duration::from_secs(2))) {
                Ok(_) => (true, None),
                Err(e) => (false, Some(e.to_string())),
            },
            None => (false, Some("could not resolve base_url".to_string())),
        };
        BackendHealth { id: self.id.clone(), kind: BackendKind::Http, reachable, detail }
    }
}

/// Error text without the request URL's query or any credentials.
fn describe(e: reqwest::Error) -> String {
    e.without_url().to_string()
}

/// `POST {base}/audio/transcriptions` with a multipart `file` field.
#[derive(Debug, Clone)]
pub struct HttpAsr(HttpClient);

impl HttpAsr {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        HttpClient::new(cfg, "http-asr").map(Self)
    }
}

impl Asr for HttpAsr {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn transcribe(&self, clip: &AudioClip) -> Result<Transcript, BackendError> {
        let start = Instant::now();
        let wav = write_wav(clip);
        let url = self.0.url("audio/transcriptions");
        let resp = self.0.send(|c| {
            let part = multipart::Part::bytes(wav.clone())
                .file_name("audio.wav")
                .mime_str("audio/wav")
                .expect("static mime");
            let mut form = multipart::Form::new().part("file", part);
            if let Some(m) = &self.0.model_name {
                form = form.text("model", m.clone());
            }
            c.post(&url).multipart(form)
        })?;
        let body = self.0.json(resp)?;
        let text = body
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| self.0.bad("missing string field \"text\""))?;
        Ok(Transcript {
            text: text.trim().to_string(),
            backend_id: self.0.id.clone(),
            latency_s: start.elapsed().as_secs_f64(),
        })
    }

    fn health(&self) -> BackendHealth {
        self.0.health()
    }
}

/// `POST {base}/chat/completions`, single user message.
#[derive(Debug, Clone)]
pub struct HttpLlm(HttpClient);

impl HttpLlm {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        HttpClient::new(cfg, "http-llm").map(Self)
    }
}

impl Llm for HttpLlm {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt must not be empty".into()));
        }
        let url = self.0.url("chat/completions");
        let body = json!({
            "model": self.0.model_name.as_deref().unwrap_or("default"),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let resp = self.0.send(|c| c.post(&url).json(&body))?;
        let value = self.0.json(resp)?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| self.0.bad("missing choices[0].message.content"))?
            .trim();
        if content.is_empty() {
            return Err(BackendError::EmptyCompletion { backend: self.0.id.clone() });
        }
        Ok(content.to_string())
    }

    fn health(&self) -> BackendHealth {
        self.0.health()
    }
}

/// `POST {base}/audio/speech`, expecting PCM16 mono WAV bytes back.
#[derive(Debug, Clone)]
pub struct HttpTts {
    client: HttpClient,
    voice: Option<String>,
}

impl HttpTts {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { client: HttpClient::new(cfg, "http-tts")?, voice: cfg.voice.clone() })
    }
}

impl Tts for HttpTts {
    fn id(&self) -> &str {
        &self.client.id
    }

    fn synthesize(&self, text: &str, style: &StyleSpec) -> Result<AudioClip, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text to synthesise must not be empty".into()));
        }
        let url = self.client.url("audio/speech");
        let voice = style.voice_id.clone().or_else(|| self.voice.clone()).unwrap_or_else(|| "default".into());
        let body = json!({
            "model": self.client.model_name.as_deref().unwrap_or("default"),
            "input": text,
            "voice": voice,
            "instructions": style.description,
            "response_format": "wav",
        });
        let resp = self.client.send(|c| c.post(&url).json(&body))?;
        let bytes = resp.bytes().map_err(|e| BackendError::Unavailable {
            backend: self.client.id.clone(),
            detail: describe(e),
        })?;
        load_wav(&bytes).map_err(|e| BackendError::UnsupportedAudioResponse {
            backend: self.client.id.clone(),
            detail: e.to_string(),
        })
    }

    fn health(&self) -> BackendHealth {
        self.client.health()
    }
}

/// `POST {base}/embeddings`, first embedding returned.
#[derive(Debug, Clone)]
pub struct HttpEmbedder(HttpClient);

impl HttpEmbedder {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        HttpClient::new(cfg, "http-embedder").map(Self)
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.is_empty() {
            return Ok(Embedding::zero(0));
        }
        let url = self.0.url("embeddings");
        let body = json!({
            "model": self.0.model_name.as_deref().unwrap_or("default"),
            "input": text,
        });
        let resp = self.0.send(|c| c.post(&url).json(&body))?;
        let value = self.0.json(resp)?;
        let values = value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| self.0.bad("missing data[0].embedding"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| self.0.bad("non-numeric embedding component")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Embedding::normalized(values))
    }
}
