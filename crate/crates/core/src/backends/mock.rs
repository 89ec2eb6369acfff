use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::RwLock;
use std::time::{Duration, Instant};

use super::{fnv1a64, Asr, BackendConfig, BackendError, BackendHealth, BackendKind, CompletionParams, Llm, StyleSpec, Transcript, Tts};
use crate::audio::AudioClip;
use crate::refine::{corrupt_text, extract_prompt_input, rule_refine};
use crate::sir::ImpairmentClass;

pub const MOCK_TTS_RATE: u32 = 16_000;
const SECONDS_PER_CHAR: f64 = 0.08;
const MIN_TTS_S: f64 = 0.5;
const MAX_TTS_S: f64 = 30.0;

fn pause(delay: Option<Duration>) {
    if let Some(d) = delay {
        std::thread::sleep(d);
    }
}

fn mock_health(id: &str) -> BackendHealth {
    BackendHealth { id: id.to_string(), kind: BackendKind::Mock, reachable: true, detail: None }
}

const VOCABULARY: &[&str] = &[
    "please", "play", "some", "music", "turn", "on", "the", "lights", "in", "kitchen", "what", "is",
    "weather", "like", "today", "set", "an", "alarm", "for", "seven", "call", "my", "sister", "book",
    "a", "table", "at", "noon", "open", "window", "bring", "water",
];

/// Transcribes from registered sidecar transcripts, or else from a
/// deterministic pseudo-sentence derived from the clip's content hash.
#[derive(Debug, Default)]
pub struct MockAsr {
    id: String,
    sidecars: RwLock<HashMap<String, String>>,
    strict: bool,
    delay: Option<Duration>,
}

impl MockAsr {
    pub fn new() -> Self {
        Self { id: "mock-asr".into(), ..Self::default() }
    }

    pub fn from_config(cfg: &BackendConfig) -> Self {
        Self {
            id: cfg.id.clone().unwrap_or_else(|| "mock-asr".into()),
            delay: cfg.delay(),
            ..Self::default()
        }
    }

    /// Only answer for clips with a registered sidecar transcript.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn with_delay(mut self, delay_s: f64) -> Self {
        self.delay = (delay_s > 0.0).then(|| Duration::from_secs_f64(delay_s));
        self
    }

    pub fn register(&self, clip: &AudioClip, transcript: impl Into<String>) {
        self.sidecars
            .write()
            .expect("sidecar lock")
            .insert(clip.content_hash(), transcript.into());
    }

    /// Stutter-flavoured sentence picked from a fixed vocabulary.
    pub fn hashed_transcript(clip_hash: &str) -> String {
        let seed = fnv1a64(clip_hash.as_bytes());
        let n_words = 4 + (seed % 4) as usize;
        let mut state = seed;
        let words: Vec<&str> = (0..n_words)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                VOCABULARY[(state >> 33) as usize % VOCABULARY.len()]
            })
            .collect();
        corrupt_text(&words.join(" "), ImpairmentClass::Stutter, seed).expect("non-empty intent")
    }
}

impl Asr for MockAsr {
    fn id(&self) -> &str {
        &self.id
    }

    fn transcribe(&self, clip: &AudioClip) -> Result<Transcript, BackendError> {
        let start = Instant::now();
        pause(self.delay);
        let hash = clip.content_hash();
        let sidecar = self.sidecars.read().expect("sidecar lock").get(&hash).cloned();
        let text = match sidecar {
            Some(t) => t,
            None if self.strict => return Err(BackendError::MockFixtureMissing { clip_hash: hash }),
            None => Self::hashed_transcript(&hash),
        };
        Ok(Transcript { text, backend_id: self.id.clone(), latency_s: start.elapsed().as_secs_f64() })
    }

    fn health(&self) -> BackendHealth {
        mock_health(&self.id)
    }
}

/// Applies the rule refiner to the prompt's input slot.
#[derive(Debug, Clone)]
pub struct MockLlm {
    id: String,
    delay: Option<Duration>,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl MockLlm {
    pub fn new() -> Self {
        Self { id: "mock-llm".into(), delay: None }
    }

    pub fn from_config(cfg: &BackendConfig) -> Self {
        Self { id: cfg.id.clone().unwrap_or_else(|| "mock-llm".into()), delay: cfg.delay() }
    }

    pub fn with_delay(mut self, delay_s: f64) -> Self {
        self.delay = (delay_s > 0.0).then(|| Duration::from_secs_f64(delay_s));
        self
    }
}

fn condition_class(prompt: &str) -> Option<ImpairmentClass> {
    let line = prompt.lines().find(|l| l.starts_with("Condition:"))?.to_lowercase();
    ImpairmentClass::IMPAIRED.into_iter().find(|c| line.contains(c.name()))
}

impl Llm for MockLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt must not be empty".into()));
        }
        pause(self.delay);
        let input = extract_prompt_input(prompt);
        let refined = if input.trim().is_empty() {
            String::new()
        } else {
            rule_refine(input, condition_class(prompt)).unwrap_or_default()
        };
        if refined.is_empty() {
            return Err(BackendError::EmptyCompletion { backend: self.id.clone() });
        }
        Ok(refined)
    }

    fn health(&self) -> BackendHealth {
        mock_health(&self.id)
    }
}

/// Renders each word as a sine burst whose pitch is keyed by the word.
///
/// Duration is 0.08 s per character, clamped to [0.5 s, 30 s]; words share
/// the clip in proportion to their length. Samples sit on the PCM16 grid.
#[derive(Debug, Clone)]
pub struct MockTts {
    id: String,
    delay: Option<Duration>,
}

impl Default for MockTts {
    fn default() -> Self {
        Self::new()
    }
}

impl MockTts {
    pub fn new() -> Self {
        Self { id: "mock-tts".into(), delay: None }
    }

    pub fn from_config(cfg: &BackendConfig) -> Self {
        Self { id: cfg.id.clone().unwrap_or_else(|| "mock-tts".into()), delay: cfg.delay() }
    }

    pub fn with_delay(mut self, delay_s: f64) -> Self {
        self.delay = (delay_s > 0.0).then(|| Duration::from_secs_f64(delay_s));
        self
    }

    pub fn duration_for(text: &str) -> f64 {
        (text.chars().count() as f64 * SECONDS_PER_CHAR).clamp(MIN_TTS_S, MAX_TTS_S)
    }

    /// Pitch (Hz) used for `word`; always inside 300-1850 Hz.
    pub fn word_frequency(word: &str, style: &StyleSpec) -> f64 {
        let base = 300.0 + (fnv1a64(word.to_lowercase().as_bytes()) % 1500) as f64;
        let style_key = format!("{}|{}", style.description, style.voice_id.as_deref().unwrap_or(""));
        base + (fnv1a64(style_key.as_bytes()) % 50) as f64
    }

    pub fn render(text: &str, style: &StyleSpec) -> Result<AudioClip, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text to synthesise must not be empty".into()));
        }
        let sr = MOCK_TTS_RATE as f64;
        let total = (Self::duration_for(text) * sr).round() as usize;
        let words: Vec<&str> = text.split_whitespace().collect();
        let weights: Vec<usize> = words.iter().map(|w| w.chars().count()).collect();
        let weight_sum: usize = weights.iter().sum();
        let fade = (0.008 * sr) as usize;

        let mut samples = Vec::with_capacity(total);
        let mut cumulative = 0usize;
        for (word, weight) in words.iter().zip(&weights) {
            cumulative += weight;
            let end = total * cumulative / weight_sum;
            let len = end - samples.len();
            let freq = Self::word_frequency(word, style);
            for i in 0..len {
                let ramp = i.min(len - 1 - i).min(fade) as f64 / fade as f64;
                let env = 0.5 - 0.5 * (PI * ramp).cos();
                samples.push((0.5 * env * (2.0 * PI * freq * i as f64 / sr).sin()) as f32);
            }
        }
        AudioClip::new(samples, MOCK_TTS_RATE)
            .map(|clip| clip.pcm16())
            .map_err(|e| BackendError::UnsupportedAudioResponse { backend: "mock-tts".into(), detail: e.to_string() })
    }
}

impl Tts for MockTts {
    fn id(&self) -> &str {
        &self.id
    }

    fn synthesize(&self, text: &str, style: &StyleSpec) -> Result<AudioClip, BackendError> {
        pause(self.delay);
        Self::render(text, style)
    }

    fn health(&self) -> BackendHealth {
        mock_health(&self.id)
    }
}
