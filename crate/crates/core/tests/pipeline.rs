use std::sync::Arc;

use speech_refine::audio::{load_wav, write_wav, AudioClip, DspConfig};
use speech_refine::backends::{
    BackendError, BackendHealth, Backends, CompletionParams, Llm, MockAsr, MockLlm, MockTts, StyleSpec,
};
use speech_refine::fixtures::{constant_level_dataset, synthetic_item};
use speech_refine::pipeline::{
    latency_report, AudioSlot, Pipeline, PipelineError, RefineOptions, SessionStatus, SessionStore, Stage,
};
use speech_refine::refine::rule_refine;
use speech_refine::sir::{train, ImpairmentClass, SirModel, TrainHyper};

fn tiny_model(cfg: &DspConfig) -> Arc<SirModel> {
    let data = constant_level_dataset(3, 4, cfg, 0);
    let hyper = TrainHyper { d: 4, epochs: 2, ..TrainHyper::default() };
    Arc::new(train(&data, &hyper, &cfg.fingerprint()).unwrap().model)
}

fn pipeline_with(backends: Backends, store: Arc<SessionStore>) -> Pipeline {
    let cfg = DspConfig::default();
    Pipeline::new(tiny_model(&cfg), &cfg, backends, store).unwrap()
}

fn stutter_clip() -> (AudioClip, String) {
    let item = synthetic_item(ImpairmentClass::Stutter, 2, 7).unwrap();
    (item.clip.unwrap(), item.transcript)
}

#[test]
fn mock_stack_composes_the_mock_oracles() {
    let asr = Arc::new(MockAsr::new());
    let (clip, transcript) = stutter_clip();
    asr.register(&clip, transcript.clone());
    let backends = Backends { asr, ..Backends::mock() };
    let p = pipeline_with(backends, Arc::new(SessionStore::in_memory()));

    let run = p.refine_speech(&clip, &RefineOptions::default()).unwrap();
    let s = &run.session;
    assert_eq!(s.status, SessionStatus::Complete);
    assert_eq!(s.transcript.as_deref(), Some(transcript.as_str()));
    let expected = rule_refine(&transcript, None).unwrap();
    assert_eq!(s.refined_text.as_deref(), Some(expected.as_str()));
    let rendered = MockTts::render(&expected, &StyleSpec::default()).unwrap();
    assert_eq!(run.output_wav.as_deref(), Some(&write_wav(&rendered)[..]));
    assert!(s.impairment.is_some() && s.output_audio_ref.is_some());

    let t = &s.timings;
    assert!((t.total_s / t.audio_duration_s - t.rtf).abs() < 1e-9);
    assert!(t.stages.sum() <= t.total_s * 1.05);
    assert!(t.rtf < 1.0);
}

#[test]
fn identical_requests_give_identical_outputs() {
    let p = pipeline_with(Backends::mock(), Arc::new(SessionStore::in_memory()));
    let (clip, _) = stutter_clip();
    let a = p.refine_speech(&clip, &RefineOptions::default()).unwrap();
    let b = p.refine_speech(&clip, &RefineOptions::default()).unwrap();
    assert_ne!(a.session.id, b.session.id);
    assert_eq!(a.session.transcript, b.session.transcript);
    assert_eq!(a.session.refined_text, b.session.refined_text);
    assert_eq!(a.output_wav, b.output_wav);
}

#[test]
fn forced_healthy_uses_the_plain_prompt() {
    let p = pipeline_with(Backends::mock(), Arc::new(SessionStore::in_memory()));
    let (clip, _) = stutter_clip();
    let opts = RefineOptions { force_class: Some(ImpairmentClass::Healthy), ..RefineOptions::default() };
    let s = p.refine_speech(&clip, &opts).unwrap().session;
    assert!(s.impairment.is_none());
    assert_eq!(s.timings.stages.sir_s, 0.0);
    assert!(!s.prompt_used.unwrap().contains("Condition:"));

    let opts = RefineOptions { force_class: Some(ImpairmentClass::Stutter), ..RefineOptions::default() };
    let s = p.refine_speech(&clip, &opts).unwrap().session;
    assert!(s.prompt_used.unwrap().contains("Condition: this is a text from a speaker with a stutter"));
}

struct BrokenLlm;

impl Llm for BrokenLlm {
    fn id(&self) -> &str {
        "broken-llm"
    }

    fn complete(&self, _prompt: &str, _params: &CompletionParams) -> Result<String, BackendError> {
        Err(BackendError::Unavailable { backend: "broken-llm".into(), detail: "down".into() })
    }

    fn health(&self) -> BackendHealth {
        MockLlm::new().health()
    }
}

#[test]
fn failures_are_attributed_and_keep_earlier_results() {
    let store = Arc::new(SessionStore::in_memory());
    let (clip, _) = stutter_clip();

    let p = pipeline_with(Backends { llm: Arc::new(BrokenLlm), ..Backends::mock() }, store.clone());
    let s = p.refine_speech(&clip, &RefineOptions::default()).unwrap().session;
    assert!(matches!(&s.status, SessionStatus::Failed { stage: Stage::Refine, kind, .. } if kind == "BackendUnavailable"));
    assert!(s.impairment.is_some() && s.transcript.is_some());
    assert!(s.refined_text.is_none() && s.output_audio_ref.is_none());

    let p = pipeline_with(Backends { asr: Arc::new(MockAsr::new().strict()), ..Backends::mock() }, store.clone());
    let s = p.refine_speech(&clip, &RefineOptions::default()).unwrap().session;
    assert!(matches!(s.status, SessionStatus::Failed { stage: Stage::Asr, .. }));
    assert!(s.impairment.is_some() && s.transcript.is_none());

    let stored = store.list().unwrap();
    assert_eq!(stored.len(), 2);
    assert!(matches!(latency_report(&stored), Err(PipelineError::NoCompleteSessions)));
}

#[test]
fn durations_outside_bounds_are_rejected_without_a_session() {
    let store = Arc::new(SessionStore::in_memory());
    let p = pipeline_with(Backends::mock(), store.clone());
    let short = AudioClip::tone(440.0, 0.3, 0.1, 16_000).unwrap();
    assert!(matches!(p.refine_speech(&short, &RefineOptions::default()), Err(PipelineError::AudioTooShort { .. })));
    let long = AudioClip::silence(16_000 * 61, 16_000).unwrap();
    assert!(matches!(p.refine_speech(&long, &RefineOptions::default()), Err(PipelineError::AudioTooLong { .. })));
    assert!(store.list().unwrap().is_empty());
}

#[test]
fn directory_store_is_append_only_and_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SessionStore::open(dir.path()).unwrap());
    let p = pipeline_with(Backends::mock(), store.clone());
    let clip = AudioClip::tone(300.0, 0.4, 1.0, 48_000).unwrap();
    let run = p.refine_speech(&clip, &RefineOptions::default()).unwrap();
    let id = &run.session.id;

    let first = store.get_json(id).unwrap().unwrap();
    assert_eq!(store.get_json(id).unwrap().unwrap(), first);
    assert_eq!(store.get(id).unwrap().unwrap(), run.session);
    assert_eq!(store.audio(id, AudioSlot::Output).unwrap(), run.output_wav);
    let input = load_wav(&store.audio(id, AudioSlot::Input).unwrap().unwrap()).unwrap();
    assert_eq!(input.sample_rate(), 48_000);

    let reopened = SessionStore::open(dir.path()).unwrap();
    assert_eq!(reopened.list().unwrap(), vec![run.session.clone()]);
    assert!(store.get_json("00000000-0000-0000-0000-000000000000").unwrap().is_none());
}

#[test]
fn configured_sleeps_show_up_as_stage_fractions() {
    let backends = Backends {
        asr: Arc::new(MockAsr::new().with_delay(0.35)),
        llm: Arc::new(MockLlm::new().with_delay(0.43)),
        tts: Arc::new(MockTts::new().with_delay(0.13)),
        ..Backends::mock()
    };
    let p = pipeline_with(backends, Arc::new(SessionStore::in_memory()));
    let clip = AudioClip::tone(500.0, 0.3, 11.49, 16_000).unwrap();
    let run = p.refine_speech(&clip, &RefineOptions::default()).unwrap();
    let report = latency_report(&[run.session]).unwrap();
    let f = report.fractions;
    let total = report.mean_total_s;
    for (got, sleep) in [(f.asr_s, 0.35), (f.refine_s, 0.43), (f.tts_s, 0.13)] {
        let want = sleep / total;
        assert!((got - want).abs() <= 0.1 * want, "{got} vs {want}");
    }
    assert!(report.mean_rtf < 1.0);
}
