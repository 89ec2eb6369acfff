use base64::Engine;
use reqwest::blocking::{multipart, Client};
use serde_json::Value;
use speech_refine::audio::{load_wav, write_wav, AudioClip, DspConfig};
use speech_refine::backends::{MockTts, StyleSpec};
use speech_refine::config::ServiceConfig;
use speech_refine::fixtures::{constant_level_dataset, synthetic_item};
use speech_refine::refine::rule_refine;
use speech_refine::sir::{train, ImpairmentClass, TrainHyper};
use speech_refine_server::{AppState, BackgroundServer};

struct Harness {
    server: BackgroundServer,
    client: Client,
    _dir: tempfile::TempDir,
}

fn start(token_env: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let dsp = DspConfig::default();
    let data = constant_level_dataset(3, 4, &dsp, 0);
    let model = train(&data, &TrainHyper { d: 4, epochs: 2, ..TrainHyper::default() }, &dsp.fingerprint()).unwrap().model;
    let model_path = dir.path().join("sir.json");
    model.save(&model_path).unwrap();
    let cfg = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        model_path: Some(model_path),
        session_dir: Some(dir.path().join("sessions")),
        api_token_env: token_env.map(str::to_string),
        ..ServiceConfig::default()
    };
    let state = AppState::from_config(&cfg).unwrap();
    let server = BackgroundServer::start(state, cfg).unwrap();
    Harness { server, client: Client::new(), _dir: dir }
}

fn wav_part(bytes: Vec<u8>) -> multipart::Part {
    multipart::Part::bytes(bytes).file_name("in.wav").mime_str("audio/wav").unwrap()
}

fn post_refine(h: &Harness, form: multipart::Form) -> (u16, Value) {
    let resp = h.client.post(format!("{}/v1/refine", h.server.url())).multipart(form).send().unwrap();
    (resp.status().as_u16(), resp.json().unwrap())
}

fn clip_bytes() -> Vec<u8> {
    write_wav(&synthetic_item(ImpairmentClass::Stutter, 1, 3).unwrap().clip.unwrap())
}

#[test]
fn refine_round_trip_returns_the_contract() {
    let h = start(None);
    let (status, body) = post_refine(&h, multipart::Form::new().part("audio", wav_part(clip_bytes())));
    assert_eq!(status, 200, "{body}");
    for key in ["session_id", "impairment", "transcript", "refined_text", "audio_wav_base64", "timings"] {
        assert!(!body[key].is_null(), "missing {key}");
    }
    assert_eq!(body["impairment"]["probs"].as_array().unwrap().len(), 4);
    for key in ["ingest_s", "sir_s", "asr_s", "refine_s", "tts_s", "total_s", "rtf"] {
        assert!(body["timings"][key].as_f64().unwrap() >= 0.0, "{key}");
    }

    let transcript = body["transcript"].as_str().unwrap();
    let refined = body["refined_text"].as_str().unwrap();
    assert_eq!(refined, rule_refine(transcript, None).unwrap());
    let wav = base64::engine::general_purpose::STANDARD.decode(body["audio_wav_base64"].as_str().unwrap()).unwrap();
    assert_eq!(wav, write_wav(&MockTts::render(refined, &StyleSpec::default()).unwrap()));

    let id = body["session_id"].as_str().unwrap();
    let url = format!("{}/v1/sessions/{id}", h.server.url());
    let first = h.client.get(&url).send().unwrap().bytes().unwrap();
    let second = h.client.get(&url).send().unwrap().bytes().unwrap();
    assert_eq!(first, second);
    let stored: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(stored["refined_text"], body["refined_text"]);

    let out = h.client.get(format!("{url}/audio/output")).send().unwrap().bytes().unwrap();
    assert_eq!(out.to_vec(), wav);
    let input = h.client.get(format!("{url}/audio/input")).send().unwrap().bytes().unwrap();
    assert_eq!(load_wav(&input).unwrap().sample_rate(), 16_000);

    let metrics: Value = h.client.get(format!("{}/v1/metrics", h.server.url())).send().unwrap().json().unwrap();
    assert_eq!(metrics["n_trials"], 1);
    let health: Value = h.client.get(format!("{}/v1/health", h.server.url())).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["backends"]["llm"]["reachable"], true);
}

#[test]
fn identical_uploads_give_identical_audio() {
    let h = start(None);
    let (_, a) = post_refine(&h, multipart::Form::new().part("audio", wav_part(clip_bytes())));
    let (_, b) = post_refine(&h, multipart::Form::new().part("audio", wav_part(clip_bytes())));
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["audio_wav_base64"], b["audio_wav_base64"]);
    assert_eq!(a["refined_text"], b["refined_text"]);
}

#[test]
fn options_are_honoured() {
    let h = start(None);
    let form = multipart::Form::new()
        .part("audio", wav_part(clip_bytes()))
        .text("force_class", "aphasia")
        .text("use_class_in_prompt", "false")
        .text("style", "slow and warm");
    let (status, body) = post_refine(&h, form);
    assert_eq!(status, 200);
    assert_eq!(body["impairment"]["label"], "aphasia");
    assert_eq!(body["impairment"]["forced"], true);
    let refined = body["refined_text"].as_str().unwrap();
    let wav = base64::engine::general_purpose::STANDARD.decode(body["audio_wav_base64"].as_str().unwrap()).unwrap();
    let styled = StyleSpec::new("slow and warm").unwrap();
    assert_eq!(wav, write_wav(&MockTts::render(refined, &styled).unwrap()));

    let (status, body) = post_refine(&h, multipart::Form::new().part("audio", wav_part(clip_bytes())).text("force_class", "mumble"));
    assert_eq!(status, 400);
    assert_eq!(body["error"]["kind"], "InvalidField");
}

#[test]
fn malformed_uploads_are_rejected_at_ingest() {
    let h = start(None);
    let cases: Vec<(multipart::Form, &str)> = vec![
        (multipart::Form::new().part("audio", wav_part(vec![1, 2, 3])), "MalformedContainer"),
        (multipart::Form::new().text("style", "calm"), "MissingAudio"),
        (
            multipart::Form::new().part("audio", wav_part(write_wav(&AudioClip::tone(300.0, 0.3, 0.1, 16_000).unwrap()))),
            "AudioTooShort",
        ),
    ];
    for (form, kind) in cases {
        let (status, body) = post_refine(&h, form);
        assert_eq!(status, 400, "{body}");
        assert_eq!(body["error"]["kind"], kind);
        assert_eq!(body["error"]["stage"], "ingest");
    }
    let resp = h.client.get(format!("{}/v1/metrics", h.server.url())).send().unwrap();
    assert_eq!(resp.status().as_u16(), 404);
    let resp = h.client.get(format!("{}/v1/sessions/not-a-session", h.server.url())).send().unwrap();
    assert_eq!(resp.status().as_u16(), 404);
}

#[test]
fn static_token_guards_everything_but_health() {
    std::env::set_var("SPEECH_REFINE_SERVER_TEST_TOKEN", "letmein");
    let h = start(Some("SPEECH_REFINE_SERVER_TEST_TOKEN"));
    let url = format!("{}/v1/refine", h.server.url());
    for path in ["/v1/metrics", "/v1/sessions/abc"] {
        let denied = h.client.get(format!("{}{path}", h.server.url())).send().unwrap();
        assert_eq!(denied.status().as_u16(), 401, "{path}");
        let wrong = h.client.get(format!("{}{path}", h.server.url())).bearer_auth("nope").send().unwrap();
        assert_eq!(wrong.status().as_u16(), 401, "{path}");
    }
    let ok = h
        .client
        .post(&url)
        .bearer_auth("letmein")
        .multipart(multipart::Form::new().part("audio", wav_part(clip_bytes())))
        .send()
        .unwrap();
    assert_eq!(ok.status().as_u16(), 200);
    assert_eq!(h.client.get(format!("{}/v1/health", h.server.url())).send().unwrap().status().as_u16(), 200);
}

#[test]
fn server_stops_cleanly() {
    let h = start(None);
    let url = h.server.url();
    h.server.stop().unwrap();
    assert!(Client::new().get(format!("{url}/v1/health")).send().is_err());
}
