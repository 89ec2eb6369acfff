//! Latency profiling over repeated pipeline runs, in-process or against a
//! running server.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use speech_refine::audio::{write_wav, AudioClip};
use speech_refine::pipeline::{LatencyReport, Pipeline, RefineOptions, Stage, StageTimings};

use crate::report::render_table;
use crate::{BenchError, EvalRunConfig};

/// Where requests go.
pub enum ProfileTarget<'a> {
    InProcess(&'a Pipeline),
    Remote { url: String, token: Option<String> },
}

impl ProfileTarget<'_> {
    fn describe(&self) -> String {
        match self {
            Self::InProcess(_) => "in-process".into(),
            Self::Remote { url, .. } => url.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sample_id: String,
    pub trial: usize,
    pub llm_backend: String,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub config: EvalRunConfig,
    pub target: String,
    pub n_trials_per_entry: usize,
    pub n_failed: usize,
    pub latency: LatencyReport,
    pub trials: Vec<TrialRecord>,
}

impl ProfileReport {
    pub fn to_text(&self) -> String {
        let l = &self.latency;
        let headers = ["stage", "mean s", "max s", "share %"].map(String::from);
        let mut rows: Vec<Vec<String>> = Stage::ALL
            .iter()
            .map(|&s| {
                vec![
                    s.name().to_string(),
                    format!("{:.4}", l.mean.get(s)),
                    format!("{:.4}", l.max.get(s)),
                    format!("{:.1}", 100.0 * l.fractions.get(s)),
                ]
            })
            .collect();
        rows.push(vec!["total".into(), format!("{:.4}", l.mean_total_s), "".into(), "".into()]);
        let mut text = render_table(&headers, &rows);
        text.push_str(&format!(
            "\nRTF {:.4} over {} runs; mean audio {:.2} s; target {}; {} failed\n\n",
            l.mean_rtf, l.n_trials, l.mean_audio_duration_s, self.target, self.n_failed
        ));
        let headers = ["llm backend", "n", "refine s", "total s", "RTF"].map(String::from);
        let rows: Vec<Vec<String>> = l
            .per_llm_backend
            .iter()
            .map(|b| {
                vec![
                    b.llm_backend.clone(),
                    b.n.to_string(),
                    format!("{:.4}", b.mean_refine_s),
                    format!("{:.4}", b.mean_total_s),
                    format!("{:.4}", b.mean_rtf),
                ]
            })
            .collect();
        text.push_str(&render_table(&headers, &rows));
        text
    }

    /// Stage-share bar data: `stage,mean_s,max_s,fraction`.
    pub fn write_stage_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "mean_s", "max_s", "fraction"])?;
        for s in Stage::ALL {
            let l = &self.latency;
            w.write_record([
                s.name().to_string(),
                l.mean.get(s).to_string(),
                l.max.get(s).to_string(),
                l.fractions.get(s).to_string(),
            ])?;
        }
        w.flush().map_err(BenchError::io(path))
    }

    /// Per-LLM comparison: `llm_backend,n,mean_refine_s,mean_total_s,mean_rtf`.
    pub fn write_backend_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["llm_backend", "n", "mean_refine_s", "mean_total_s", "mean_rtf"])?;
        for b in &self.latency.per_llm_backend {
            w.write_record([
                b.llm_backend.clone(),
                b.n.to_string(),
                b.mean_refine_s.to_string(),
                b.mean_total_s.to_string(),
                b.mean_rtf.to_string(),
            ])?;
        }
        w.flush().map_err(BenchError::io(path))
    }
}

#[derive(Deserialize)]
struct RemoteBackendIds {
    llm: String,
}

#[derive(Deserialize)]
struct RemoteResponse {
    timings: StageTimings,
    backend_ids: RemoteBackendIds,
}

struct Remote {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl Remote {
    fn connect(url: &str, token: Option<String>) -> Result<Self, BenchError> {
        let url = url.trim_end_matches('/').to_string();
        let unreachable = |detail: String| BenchError::ServerUnreachable { url: url.clone(), detail };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| unreachable(e.to_string()))?;
        let resp = client.get(format!("{url}/v1/health")).send().map_err(|e| unreachable(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(unreachable(format!("health check returned {}", resp.status())));
        }
        Ok(Self { client, url, token })
    }

    fn refine(&self, wav: &[u8]) -> Result<(StageTimings, String), String> {
        let part = reqwest::blocking::multipart::Part::bytes(wav.to_vec())
            .file_name("clip.wav")
            .mime_str("audio/wav")
            .map_err(|e| e.to_string())?;
        let mut req = self
            .client
            .post(format!("{}/v1/refine", self.url))
            .multipart(reqwest::blocking::multipart::Form::new().part("audio", part));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| e.without_url().to_string())?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| e.without_url().to_string())?;
        if !status.is_success() {
            return Err(format!("server returned {status}: {}", String::from_utf8_lossy(&body)));
        }
        let r: RemoteResponse = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        Ok((r.timings, r.backend_ids.llm))
    }
}

/// Runs `n_trials` requests per clip, one at a time so stage timings are
/// not distorted by contention, and aggregates the complete ones.
pub fn profile_latency(
    clips: &[(String, AudioClip)],
    n_trials: usize,
    target: ProfileTarget<'_>,
    cfg: &EvalRunConfig,
) -> Result<ProfileReport, BenchError> {
    if n_trials == 0 {
        return Err(BenchError::InvalidConfig("n_trials must be at least 1".into()));
    }
    if clips.is_empty() {
        return Err(BenchError::InsufficientData("no clips to profile".into()));
    }
    let remote = match &target {
        ProfileTarget::Remote { url, token } => Some(Remote::connect(url, token.clone())?),
        ProfileTarget::InProcess(_) => None,
    };
    let mut trials = Vec::new();
    let mut n_failed = 0;
    for (sample_id, clip) in clips {
        let wav = remote.as_ref().map(|_| write_wav(clip));
        for trial in 0..n_trials {
            let outcome = match (&target, &remote) {
                (ProfileTarget::InProcess(p), _) => match p.refine_speech(clip, &RefineOptions::default()) {
                    Ok(run) if run.session.is_complete() => Ok((run.session.timings, run.session.backend_ids.llm)),
                    Ok(run) => Err(format!("session {} failed", run.session.id)),
                    Err(e) => Err(e.to_string()),
                },
                (_, Some(r)) => r.refine(wav.as_deref().unwrap_or_default()),
                (ProfileTarget::Remote { .. }, None) => unreachable!("remote target is connected above"),
            };
            match outcome {
                Ok((timings, llm_backend)) => {
                    trials.push(TrialRecord { sample_id: sample_id.clone(), trial, llm_backend, timings })
                }
                Err(e) => {
                    tracing::warn!(sample_id, trial, error = %e, "profile run failed");
                    n_failed += 1;
                }
            }
        }
    }
    let latency = LatencyReport::from_timings(trials.iter().map(|t| (&t.timings, t.llm_backend.as_str())))?;
    Ok(ProfileReport {
        config: cfg.clone(),
        target: target.describe(),
        n_trials_per_entry: n_trials,
        n_failed,
        latency,
        trials,
    })
}

/// Writes `profile.json`, `profile.txt`, `stage_shares.csv` and `llm_backends.csv`.
pub fn write_profile(report: &ProfileReport, dir: &Path) -> Result<(), BenchError> {
    crate::report::write_report(dir, "profile", report, &report.to_text())?;
    report.write_stage_csv(&dir.join("stage_shares.csv"))?;
    report.write_backend_csv(&dir.join("llm_backends.csv"))
}
