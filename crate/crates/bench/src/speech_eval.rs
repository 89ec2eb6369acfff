//! Speech-side evaluation: run the full pipeline on each recording, count
//! how often the classifier hears the result as healthy, and prepare the
//! listening test.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use speech_refine::audio::{load_wav, resample, write_wav, AudioClip, DspConfig};
use speech_refine::backends::{BackendKind, Backends, CompletionParams, MockAsr, MockLlm, StyleSpec};
use speech_refine::pipeline::{Pipeline, RefineOptions, SessionStatus, SessionStore};
use speech_refine::refine::PromptTemplates;
use speech_refine::sir::{ImpairmentClass, SirModel, SirPredictor};

use crate::listening::{build_listening, ListeningBundle, PairSource, RatingsReport};
use crate::manifest::Manifest;
use crate::report::{fmt_opt, render_table};
use crate::text_eval::{EntryFailure, IMPAIRED_ROW};
use crate::{BenchError, EvalRunConfig, RefinerVariant};

/// Pipeline settings shared by every entry.
#[derive(Debug, Clone, Default)]
pub struct SpeechEvalSettings {
    pub dsp: DspConfig,
    pub style: StyleSpec,
    pub templates: PromptTemplates,
    pub llm_params: CompletionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechCell {
    pub class: ImpairmentClass,
    /// Clips scored for recovery.
    pub n: usize,
    /// Percentage classified healthy.
    pub recover: Option<f64>,
    pub clarity: Option<f64>,
    pub cmos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechRow {
    pub system: String,
    pub cells: Vec<SpeechCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechEvalReport {
    pub config: EvalRunConfig,
    pub model_fingerprint: String,
    pub listening_seed: u64,
    pub listening_system: String,
    pub n_entries: usize,
    pub classes: Vec<ImpairmentClass>,
    pub rows: Vec<SpeechRow>,
    pub n_failed: usize,
    pub failures: Vec<EntryFailure>,
}

impl SpeechEvalReport {
    pub fn cell(&self, system: &str, class: ImpairmentClass) -> Option<&SpeechCell> {
        self.rows.iter().find(|r| r.system == system)?.cells.iter().find(|c| c.class == class)
    }

    /// Copies unblinded rating means into the Clarity and C-MOS columns.
    pub fn apply_ratings(&mut self, ratings: &RatingsReport) {
        for s in &ratings.summaries {
            for row in &mut self.rows {
                let Some(cell) = row.cells.iter_mut().find(|c| c.class == s.class_label) else { continue };
                if row.system == IMPAIRED_ROW {
                    cell.clarity = s.clarity_impaired.or(cell.clarity);
                } else if row.system == s.system {
                    cell.clarity = s.clarity_refined;
                    cell.cmos = Some(s.cmos);
                }
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut headers = vec!["system".to_string()];
        for c in &self.classes {
            headers.extend([format!("{c} Clarity"), format!("{c} C-MOS"), format!("{c} Recover")]);
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.system.clone()];
                for c in &r.cells {
                    row.extend([fmt_opt(c.clarity, 2), fmt_opt(c.cmos, 2), fmt_opt(c.recover, 1)]);
                }
                row
            })
            .collect();
        let mut text = render_table(&headers, &rows);
        text.push_str(&format!("\n{} entries; {} failed runs\n", self.n_entries, self.n_failed));
        text.push_str("* Recover: percentage of clips the classifier labels healthy.\n");
        text.push_str("* Clarity and C-MOS stay empty until rating sheets are ingested.\n");
        text
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEvalOutput {
    pub report: SpeechEvalReport,
    pub listening: ListeningBundle,
}

struct EntryResult {
    baseline: Result<ImpairmentClass, String>,
    refined: Vec<Result<(ImpairmentClass, Vec<u8>), String>>,
}

fn variant_options(v: RefinerVariant, style: &StyleSpec) -> RefineOptions {
    RefineOptions {
        style: style.clone(),
        force_class: None,
        use_class_in_prompt: v != RefinerVariant::WithoutClass,
    }
}

/// Runs every variant in `cfg.variants` over the manifest's recordings.
///
/// With a mock recogniser the entry's `impaired_text` (or else its
/// `intent_text`) is registered as the clip's transcript. The rule variant
/// swaps the language model for the offline mock. The first variant feeds
/// the listening test, shuffled with the first seed.
pub fn run_speech_eval(
    manifest: &Manifest,
    cfg: &EvalRunConfig,
    model: Option<Arc<SirModel>>,
    settings: &SpeechEvalSettings,
) -> Result<SpeechEvalOutput, BenchError> {
    cfg.validate()?;
    let model = model.ok_or(BenchError::MissingModel)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.audio_path.is_none() {
            return Err(BenchError::ManifestInvalid {
                line: i + 1,
                reason: format!("{}: audio_path required for speech evaluation", e.sample_id),
            });
        }
    }
    let pool = cfg.thread_pool()?;
    let clips: Vec<AudioClip> = pool.install(|| {
        manifest.entries.par_iter().map(|e| manifest.load_audio(e)).collect::<Result<_, _>>()
    })?;

    let mut backends = Backends::from_config(&cfg.backends)?;
    if cfg.backends.asr.kind == BackendKind::Mock {
        let asr = MockAsr::from_config(&cfg.backends.asr);
        for (entry, clip) in manifest.entries.iter().zip(&clips) {
            if let Some(text) = entry.impaired_text.as_ref().or(entry.intent_text.as_ref()) {
                let at_rate = if clip.sample_rate() == settings.dsp.target_rate {
                    clip.clone()
                } else {
                    resample(clip, settings.dsp.target_rate)?
                };
                asr.register(&at_rate, text.clone());
            }
        }
        backends.asr = Arc::new(asr);
    }

    let predictor = SirPredictor::new(model.clone(), &settings.dsp)?;
    let pipelines: Vec<(RefinerVariant, Pipeline)> = cfg
        .variants
        .iter()
        .map(|&v| {
            let mut b = backends.clone();
            if v == RefinerVariant::Rule {
                b.llm = Arc::new(MockLlm::new());
            }
            let p = Pipeline::new(model.clone(), &settings.dsp, b, Arc::new(SessionStore::in_memory()))?
                .with_templates(settings.templates.clone())
                .with_llm_params(settings.llm_params.clone());
            Ok((v, p))
        })
        .collect::<Result<_, BenchError>>()?;

    let run_entry = |clip: &AudioClip| -> EntryResult {
        let baseline = predictor.predict(clip).map(|p| p.label).map_err(|e| e.to_string());
        let refined = pipelines
            .iter()
            .map(|(v, p)| {
                let run = p.refine_speech(clip, &variant_options(*v, &settings.style)).map_err(|e| e.to_string())?;
                if let SessionStatus::Failed { stage, error, .. } = &run.session.status {
                    return Err(format!("{} stage failed: {error}", stage.name()));
                }
                let wav = run.output_wav.ok_or("no output audio")?;
                let out = load_wav(&wav).map_err(|e| e.to_string())?;
                let label = predictor.predict(&out).map_err(|e| e.to_string())?.label;
                Ok((label, wav))
            })
            .collect();
        EntryResult { baseline, refined }
    };
    let results: Vec<EntryResult> = pool.install(|| clips.par_iter().map(run_entry).collect());

    let mut classes: Vec<ImpairmentClass> = manifest.entries.iter().map(|e| e.class_label).collect();
    classes.sort();
    classes.dedup();
    let systems: Vec<String> =
        std::iter::once(IMPAIRED_ROW.to_string()).chain(cfg.variants.iter().map(|v| v.name().to_string())).collect();

    // (system index, class) -> (healthy, scored)
    let mut tally: BTreeMap<(usize, ImpairmentClass), (usize, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut pair_sources = Vec::new();
    let seed = cfg.seeds[0];
    for ((entry, clip), result) in manifest.entries.iter().zip(&clips).zip(&results) {
        let outcomes = std::iter::once(result.baseline.clone().map(|l| (l, Vec::new())))
            .chain(result.refined.iter().cloned());
        for (k, outcome) in outcomes.enumerate() {
            match outcome {
                Ok((label, wav)) => {
                    let t = tally.entry((k, entry.class_label)).or_default();
                    t.1 += 1;
                    if label == ImpairmentClass::Healthy {
                        t.0 += 1;
                    }
                    if k == 1 {
                        pair_sources.push(PairSource {
                            sample_id: entry.sample_id.clone(),
                            class_label: entry.class_label,
                            system: systems[1].clone(),
                            impaired_wav: write_wav(clip),
                            refined_wav: wav,
                        });
                    }
                }
                Err(error) => failures.push(EntryFailure {
                    sample_id: entry.sample_id.clone(),
                    system: systems[k].clone(),
                    seed,
                    error,
                }),
            }
        }
    }

    let rows = systems
        .iter()
        .enumerate()
        .map(|(k, system)| SpeechRow {
            system: system.clone(),
            cells: classes
                .iter()
                .map(|&class| {
                    let (healthy, n) = tally.get(&(k, class)).copied().unwrap_or((0, 0));
                    SpeechCell {
                        class,
                        n,
                        recover: (n > 0).then(|| 100.0 * healthy as f64 / n as f64),
                        clarity: None,
                        cmos: None,
                    }
                })
                .collect(),
        })
        .collect();

    let listening = build_listening(&pair_sources, seed);
    Ok(SpeechEvalOutput {
        report: SpeechEvalReport {
            config: cfg.clone(),
            model_fingerprint: model.cfg_fingerprint().to_string(),
            listening_seed: seed,
            listening_system: systems[1].clone(),
            n_entries: manifest.entries.len(),
            classes,
            rows,
            n_failed: failures.len(),
            failures,
        },
        listening,
    })
}
