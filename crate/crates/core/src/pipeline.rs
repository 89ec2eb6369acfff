//! The end-to-end refinement pipeline.
//!
//! One request runs its stages in order: ingest (resample and log-Mel),
//! impairment recognition, transcription, text refinement, synthesis, and
//! response assembly. Each stage is wall-clock timed. Sessions are
//! persisted, complete or failed, before the caller sees them.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{resample, write_wav, AudioClip, AudioError, DspConfig};
use crate::backends::{Backends, CompletionParams, StyleSpec};
use crate::refine::{refine_text, PromptTemplates};
use crate::sir::{self, ClassPosterior, ImpairmentClass, SirError, SirModel, SirPredictor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("audio is {duration_s:.3} s; at least {min_s} s is required")]
    AudioTooShort { duration_s: f64, min_s: f64 },
    #[error("audio is {duration_s:.3} s; at most {max_s} s is accepted")]
    AudioTooLong { duration_s: f64, max_s: f64 },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Sir(#[from] SirError),
    #[error("no complete sessions to report on")]
    NoCompleteSessions,
    #[error("session store: {0}")]
    Store(#[from] std::io::Error),
    #[error("stored session is corrupt: {0}")]
    CorruptSession(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::AudioTooShort { .. } => "AudioTooShort",
            PipelineError::AudioTooLong { .. } => "AudioTooLong",
            PipelineError::Audio(e) => e.kind(),
            PipelineError::Sir(_) => "SirError",
            PipelineError::NoCompleteSessions => "NoCompleteSessions",
            PipelineError::Store(_) => "StoreError",
            PipelineError::CorruptSession(_) => "CorruptSession",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Sir,
    Asr,
    Refine,
    Tts,
    Respond,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ingest, Stage::Sir, Stage::Asr, Stage::Refine, Stage::Tts, Stage::Respond];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Sir => "sir",
            Stage::Asr => "asr",
            Stage::Refine => "refine",
            Stage::Tts => "tts",
            Stage::Respond => "respond",
        }
    }
}

/// Seconds spent in each stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDurations {
    pub ingest_s: f64,
    pub sir_s: f64,
    pub asr_s: f64,
    pub refine_s: f64,
    pub tts_s: f64,
    pub respond_s: f64,
}

impl StageDurations {
    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Ingest => self.ingest_s,
            Stage::Sir => self.sir_s,
            Stage::Asr => self.asr_s,
            Stage::Refine => self.refine_s,
            Stage::Tts => self.tts_s,
            Stage::Respond => self.respond_s,
        }
    }

    fn slot(&mut self, stage: Stage) -> &mut f64 {
        match stage {
            Stage::Ingest => &mut self.ingest_s,
            Stage::Sir => &mut self.sir_s,
            Stage::Asr => &mut self.asr_s,
            Stage::Refine => &mut self.refine_s,
            Stage::Tts => &mut self.tts_s,
            Stage::Respond => &mut self.respond_s,
        }
    }

    pub fn sum(&self) -> f64 {
        Stage::ALL.iter().map(|&s| self.get(s)).sum()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = *self;
        for s in Stage::ALL {
            *out.slot(s) = f(self.get(s));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    #[serde(flatten)]
    pub stages: StageDurations,
    pub total_s: f64,
    pub audio_duration_s: f64,
    /// `total_s / audio_duration_s`.
    pub rtf: f64,
}

impl StageTimings {
    pub fn new(stages: StageDurations, total_s: f64, audio_duration_s: f64) -> Self {
        Self { stages, total_s, audio_duration_s, rtf: total_s / audio_duration_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum SessionStatus {
    Complete,
    Failed { stage: Stage, kind: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub asr: String,
    pub llm: String,
    pub tts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    #[serde(default)]
    pub style: StyleSpec,
    #[serde(default)]
    pub force_class: Option<ImpairmentClass>,
    #[serde(default = "yes")]
    pub use_class_in_prompt: bool,
}

fn yes() -> bool {
    true
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { style: StyleSpec::default(), force_class: None, use_class_in_prompt: true }
    }
}

/// One pass through the pipeline, as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSession {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub input_audio_ref: String,
    /// Classifier posterior; absent when the class was forced.
    pub impairment: Option<ClassPosterior>,
    /// Class used downstream, predicted or forced.
    pub impairment_class: Option<ImpairmentClass>,
    pub transcript: Option<String>,
    pub refined_text: Option<String>,
    pub prompt_used: Option<String>,
    pub output_audio_ref: Option<String>,
    pub timings: StageTimings,
    pub backend_ids: BackendIds,
    pub options: RefineOptions,
    pub status: SessionStatus,
}

impl RefineSession {
    pub fn is_complete(&self) -> bool {
        self.status == SessionStatus::Complete
    }
}

/// A session plus the refined audio produced for it.
#[derive(Debug, Clone)]
pub struct RefineRun {
    pub session: RefineSession,
    pub output_wav: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioSlot {
    Input,
    Output,
}

#[derive(Debug)]
struct StoredSession {
    json: Vec<u8>,
    input_wav: Vec<u8>,
    output_wav: Option<Vec<u8>>,
}

#[derive(Debug)]
enum StoreBackend {
    Memory(RwLock<HashMap<String, StoredSession>>),
    Dir(PathBuf),
}

/// Append-only session records: in memory, or a directory of JSON and WAV
/// files. Records are never overwritten.
#[derive(Debug)]
pub struct SessionStore(StoreBackend);

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_hexdigit() || c == '-')
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self(StoreBackend::Memory(RwLock::new(HashMap::new())))
    }

    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self(StoreBackend::Dir(dir.to_path_buf())))
    }

    fn audio_name(id: &str, slot: AudioSlot) -> String {
        match slot {
            AudioSlot::Input => format!("{id}.input.wav"),
            AudioSlot::Output => format!("{id}.output.wav"),
        }
    }

    fn save(&self, session: &RefineSession, input_wav: &[u8], output_wav: Option<&[u8]>) -> Result<(), PipelineError> {
        let json = serde_json::to_vec_pretty(session)?;
        match &self.0 {
            StoreBackend::Memory(map) => {
                let mut map = map.write().expect("store lock");
                if map.contains_key(&session.id) {
                    return Err(std::io::Error::new(std::io::ErrorKind::AlreadyExists, "session id reused").into());
                }
                map.insert(
                    session.id.clone(),
                    StoredSession { json, input_wav: input_wav.to_vec(), output_wav: output_wav.map(<[u8]>::to_vec) },
                );
            }
            StoreBackend::Dir(dir) => {
                let write_new = |name: String, bytes: &[u8]| -> std::io::Result<()> {
                    let tmp = dir.join(format!(".{name}.tmp"));
                    std::fs::write(&tmp, bytes)?;
                    let target = dir.join(&name);
                    if target.exists() {
                        std::fs::remove_file(&tmp)?;
                        return Err(std::io::Error::new(std::io::ErrorKind::AlreadyExists, name));
                    }
                    std::fs::rename(tmp, target)
                };
                write_new(Self::audio_name(&session.id, AudioSlot::Input), input_wav)?;
                if let Some(out) = output_wav {
                    write_new(Self::audio_name(&session.id, AudioSlot::Output), out)?;
                }
                // The JSON record goes last so readers never see a session without its audio.
                write_new(format!("{}.json", session.id), &json)?;
            }
        }
        Ok(())
    }

    /// Stored JSON bytes, exactly as written.
    pub fn get_json(&self, id: &str) -> Result<Option<Vec<u8>>, PipelineError> {
        if !valid_id(id) {
            return Ok(None);
        }
        match &self.0 {
            StoreBackend::Memory(map) => Ok(map.read().expect("store lock").get(id).map(|s| s.json.clone())),
            StoreBackend::Dir(dir) => read_optional(&dir.join(format!("{id}.json"))),
        }
    }

    pub fn get(&self, id: &str) -> Result<Option<RefineSession>, PipelineError> {
        match self.get_json(id)? {
            Some(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            None => Ok(None),
        }
    }

    pub fn audio(&self, id: &str, slot: AudioSlot) -> Result<Option<Vec<u8>>, PipelineError> {
        if !valid_id(id) {
            return Ok(None);
        }
        match &self.0 {
            StoreBackend::Memory(map) => Ok(map.read().expect("store lock").get(id).and_then(|s| match slot {
                AudioSlot::Input => Some(s.input_wav.clone()),
                AudioSlot::Output => s.output_wav.clone(),
            })),
            StoreBackend::Dir(dir) => read_optional(&dir.join(Self::audio_name(id, slot))),
        }
    }

    /// Every stored session, oldest first.
    pub fn list(&self) -> Result<Vec<RefineSession>, PipelineError> {
        let mut sessions: Vec<RefineSession> = match &self.0 {
            StoreBackend::Memory(map) => map
                .read()
                .expect("store lock")
                .values()
                .map(|s| serde_json::from_slice(&s.json))
                .collect::<Result<_, _>>()?,
            StoreBackend::Dir(dir) => {
                let mut out = Vec::new();
                for entry in std::fs::read_dir(dir)? {
                    let path = entry?.path();
                    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    if name.ends_with(".json") && !name.starts_with('.') {
                        out.push(serde_json::from_slice(&std::fs::read(&path)?)?);
                    }
                }
                out
            }
        };
        sessions.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(sessions)
    }
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, PipelineError> {
    match std::fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Shared, read-only pipeline state; `refine_speech` may be called from
/// many threads at once.
pub struct Pipeline {
    predictor: SirPredictor,
    backends: Backends,
    templates: PromptTemplates,
    llm_params: CompletionParams,
    store: Arc<SessionStore>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("backends", &self.backends).finish_non_exhaustive()
    }
}

struct StageClock {
    start: Instant,
    durations: StageDurations,
}

impl StageClock {
    fn new() -> Self {
        Self { start: Instant::now(), durations: StageDurations::default() }
    }

    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.durations.slot(stage) += t.elapsed().as_secs_f64();
        out
    }

    fn timings(&self, audio_duration_s: f64) -> StageTimings {
        StageTimings::new(self.durations, self.start.elapsed().as_secs_f64(), audio_duration_s)
    }
}

impl Pipeline {
    pub fn new(model: Arc<SirModel>, dsp: &DspConfig, backends: Backends, store: Arc<SessionStore>) -> Result<Self, PipelineError> {
        Ok(Self {
            predictor: SirPredictor::new(model, dsp)?,
            backends,
            templates: PromptTemplates::default(),
            llm_params: CompletionParams::default(),
            store,
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_llm_params(mut self, params: CompletionParams) -> Self {
        self.llm_params = params;
        self
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn dsp(&self) -> &DspConfig {
        self.predictor.front_end().config()
    }

    fn backend_ids(&self) -> BackendIds {
        BackendIds {
            asr: self.backends.asr.id().to_string(),
            llm: self.backends.llm.id().to_string(),
            tts: self.backends.tts.id().to_string(),
        }
    }

    /// Runs every stage for one utterance.
    ///
    /// Clips outside [0.2 s, 60 s] are rejected without creating a session.
    /// A failing stage yields a persisted session with `Failed` status that
    /// keeps the results of the stages before it.
    pub fn refine_speech(&self, clip: &AudioClip, options: &RefineOptions) -> Result<RefineRun, PipelineError> {
        let duration_s = clip.duration_s();
        if duration_s < sir::MIN_DURATION_S {
            return Err(PipelineError::AudioTooShort { duration_s, min_s: sir::MIN_DURATION_S });
        }
        if duration_s > sir::MAX_DURATION_S {
            return Err(PipelineError::AudioTooLong { duration_s, max_s: sir::MAX_DURATION_S });
        }

        let mut clock = StageClock::new();
        let input_wav = write_wav(clip);
        let id = uuid::Uuid::new_v4().to_string();
        let mut session = RefineSession {
            id: id.clone(),
            created_at: Utc::now(),
            input_audio_ref: SessionStore::audio_name(&id, AudioSlot::Input),
            impairment: None,
            impairment_class: None,
            transcript: None,
            refined_text: None,
            prompt_used: None,
            output_audio_ref: None,
            timings: StageTimings::new(StageDurations::default(), 0.0, duration_s),
            backend_ids: self.backend_ids(),
            options: options.clone(),
            status: SessionStatus::Complete,
        };

        let failed = |session: &mut RefineSession, clock: &StageClock, stage: Stage, kind: &str, error: String| {
            session.status = SessionStatus::Failed { stage, kind: kind.to_string(), error };
            session.timings = clock.timings(duration_s);
        };

        // Ingest: resample to the front-end rate and compute features.
        let target = self.dsp().target_rate;
        let ingested = clock.run(Stage::Ingest, || -> Result<_, PipelineError> {
            let clip16 = if clip.sample_rate() == target { clip.clone() } else { resample(clip, target)? };
            let mel = self.predictor.front_end().compute(&clip16)?;
            Ok((clip16, mel))
        });
        let (clip16, mel) = match ingested {
            Ok(v) => v,
            Err(e) => {
                failed(&mut session, &clock, Stage::Ingest, e.kind(), e.to_string());
                self.store.save(&session, &input_wav, None)?;
                return Ok(RefineRun { session, output_wav: None });
            }
        };

        let class = match options.force_class {
            Some(forced) => forced,
            None => match clock.run(Stage::Sir, || sir::classify_mel(&mel, self.predictor.model())) {
                Ok(posterior) => {
                    let label = posterior.label;
                    session.impairment = Some(posterior);
                    label
                }
                Err(e) => {
                    failed(&mut session, &clock, Stage::Sir, "SirError", e.to_string());
                    self.store.save(&session, &input_wav, None)?;
                    return Ok(RefineRun { session, output_wav: None });
                }
            },
        };
        session.impairment_class = Some(class);

        match clock.run(Stage::Asr, || self.backends.asr.transcribe(&clip16)) {
            Ok(t) => session.transcript = Some(t.text),
            Err(e) => {
                failed(&mut session, &clock, Stage::Asr, e.kind(), e.to_string());
                self.store.save(&session, &input_wav, None)?;
                return Ok(RefineRun { session, output_wav: None });
            }
        }

        let transcript = session.transcript.clone().unwrap_or_default();
        let prompt_class = options.use_class_in_prompt.then_some(class);
        let refined = clock.run(Stage::Refine, || {
            refine_text(&transcript, prompt_class, self.backends.llm.as_ref(), &self.templates, &self.llm_params)
        });
        match refined {
            Ok(outcome) => {
                session.prompt_used = Some(outcome.prompt_used);
                session.refined_text = Some(outcome.refined_text);
            }
            Err(e) => {
                let kind = match &e {
                    crate::refine::RefineError::Backend(b) => b.kind(),
                    crate::refine::RefineError::EmptyInput => "EmptyTranscript",
                    _ => "RefinementFailed",
                };
                failed(&mut session, &clock, Stage::Refine, kind, e.to_string());
                self.store.save(&session, &input_wav, None)?;
                return Ok(RefineRun { session, output_wav: None });
            }
        }

        let refined_text = session.refined_text.clone().unwrap_or_default();
        let audio = match clock.run(Stage::Tts, || self.backends.tts.synthesize(&refined_text, &options.style)) {
            Ok(a) => a,
            Err(e) => {
                failed(&mut session, &clock, Stage::Tts, e.kind(), e.to_string());
                self.store.save(&session, &input_wav, None)?;
                return Ok(RefineRun { session, output_wav: None });
            }
        };

        // Respond: encode the output; timings are frozen before persisting.
        let output_wav = clock.run(Stage::Respond, || write_wav(&audio));
        session.output_audio_ref = Some(SessionStore::audio_name(&id, AudioSlot::Output));
        session.timings = clock.timings(duration_s);
        self.store.save(&session, &input_wav, Some(&output_wav))?;
        Ok(RefineRun { session, output_wav: Some(output_wav) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendLatency {
    pub llm_backend: String,
    pub n: usize,
    pub mean_refine_s: f64,
    pub mean_total_s: f64,
    pub mean_rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_trials: usize,
    pub mean: StageDurations,
    pub max: StageDurations,
    /// Mean stage duration over mean total.
    pub fractions: StageDurations,
    pub mean_total_s: f64,
    pub mean_rtf: f64,
    pub mean_audio_duration_s: f64,
    pub per_llm_backend: Vec<BackendLatency>,
}

impl LatencyReport {
    /// Aggregates `(timings, llm backend id)` observations.
    pub fn from_timings<'a>(obs: impl IntoIterator<Item = (&'a StageTimings, &'a str)>) -> Result<Self, PipelineError> {
        let obs: Vec<(&StageTimings, &str)> = obs.into_iter().collect();
        if obs.is_empty() {
            return Err(PipelineError::NoCompleteSessions);
        }
        let n = obs.len() as f64;
        let mut sum = StageDurations::default();
        let mut max = StageDurations::default();
        let (mut total, mut rtf, mut audio) = (0.0, 0.0, 0.0);
        let mut groups: BTreeMap<&str, Vec<&StageTimings>> = BTreeMap::new();
        for (t, backend) in &obs {
            for s in Stage::ALL {
                *sum.slot(s) += t.stages.get(s);
                *max.slot(s) = max.get(s).max(t.stages.get(s));
            }
            total += t.total_s;
            rtf += t.rtf;
            audio += t.audio_duration_s;
            groups.entry(backend).or_default().push(t);
        }
        let mean = sum.map(|v| v / n);
        let mean_total_s = total / n;
        // Guard the all-zero case; audio duration is positive upstream.
        let fractions = mean.map(|v| if mean_total_s > 0.0 { v / mean_total_s } else { 0.0 });
        let per_llm_backend = groups
            .into_iter()
            .map(|(id, ts)| {
                let k = ts.len() as f64;
                BackendLatency {
                    llm_backend: id.to_string(),
                    n: ts.len(),
                    mean_refine_s: ts.iter().map(|t| t.stages.refine_s).sum::<f64>() / k,
                    mean_total_s: ts.iter().map(|t| t.total_s).sum::<f64>() / k,
                    mean_rtf: ts.iter().map(|t| t.rtf).sum::<f64>() / k,
                }
            })
            .collect();
        Ok(Self {
            n_trials: obs.len(),
            mean,
            max,
            fractions,
            mean_total_s,
            mean_rtf: rtf / n,
            mean_audio_duration_s: audio / n,
            per_llm_backend,
        })
    }
}

/// Latency summary over the complete sessions in `sessions`.
pub fn latency_report(sessions: &[RefineSession]) -> Result<LatencyReport, PipelineError> {
    LatencyReport::from_timings(
        sessions
            .iter()
            .filter(|s| s.is_complete())
            .map(|s| (&s.timings, s.backend_ids.llm.as_str())),
    )
}
