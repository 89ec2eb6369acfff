//! Text-side refinement evaluation: BLEU and embedding cosine between the
//! refined text and the intended text, per impairment class and refiner.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use speech_refine::backends::{Backends, CompletionParams};
use speech_refine::metrics::{score_pair, MeanStd};
use speech_refine::refine::{corrupt_text, refine_text, rule_refine, PromptTemplates};
use speech_refine::sir::ImpairmentClass;

use crate::manifest::Manifest;
use crate::report::{entry_seed, fmt_mean_std, render_table};
use crate::{BenchError, EvalRunConfig, RefinerVariant};

/// Row label of the unrefined baseline.
pub const IMPAIRED_ROW: &str = "impaired";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCell {
    pub class: ImpairmentClass,
    /// Entries of this class scored successfully under every seed.
    pub n: usize,
    pub bleu: Option<MeanStd>,
    pub cosine: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRow {
    pub system: String,
    pub cells: Vec<TextCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub sample_id: String,
    pub system: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEvalReport {
    pub config: EvalRunConfig,
    pub llm_backend: String,
    pub embedder: String,
    pub n_entries: usize,
    pub classes: Vec<ImpairmentClass>,
    pub rows: Vec<TextRow>,
    pub n_failed: usize,
    pub failures: Vec<EntryFailure>,
    pub footnotes: Vec<String>,
}

impl TextEvalReport {
    pub fn row(&self, system: &str) -> Option<&TextRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn cell(&self, system: &str, class: ImpairmentClass) -> Option<&TextCell> {
        self.row(system)?.cells.iter().find(|c| c.class == class)
    }

    pub fn to_text(&self) -> String {
        let mut headers = vec!["system".to_string()];
        for c in &self.classes {
            headers.push(format!("{c} BLEU"));
            headers.push(format!("{c} CosSim"));
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.system.clone()];
                for cell in &r.cells {
                    row.push(fmt_mean_std(cell.bleu.as_ref()));
                    row.push(fmt_mean_std(cell.cosine.as_ref()));
                }
                row
            })
            .collect();
        let mut text = render_table(&headers, &rows);
        text.push_str(&format!(
            "\n{} entries x {} seeds; {} failed scorings\n",
            self.n_entries,
            self.config.seeds.len(),
            self.n_failed
        ));
        for note in &self.footnotes {
            text.push_str(&format!("* {note}\n"));
        }
        text
    }
}

struct Scored {
    system: String,
    class: ImpairmentClass,
    seed_index: usize,
    sample_id: String,
    result: Result<(f64, f64), String>,
}

/// Runs the evaluation with backends built from `cfg.backends`.
pub fn run_text_eval(manifest: &Manifest, cfg: &EvalRunConfig) -> Result<TextEvalReport, BenchError> {
    let backends = Backends::from_config(&cfg.backends)?;
    run_text_eval_with(manifest, cfg, &backends, &PromptTemplates::default(), &CompletionParams::default())
}

/// Every entry needs `intent_text`. Missing `impaired_text` is generated
/// by [`corrupt_text`] with a seed derived from the run seed and sample id,
/// so each seed sees a different corruption. Scores are averaged over the
/// entries of a class within a seed, then summarised across seeds.
pub fn run_text_eval_with(
    manifest: &Manifest,
    cfg: &EvalRunConfig,
    backends: &Backends,
    templates: &PromptTemplates,
    params: &CompletionParams,
) -> Result<TextEvalReport, BenchError> {
    cfg.validate()?;
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.intent_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
            return Err(BenchError::ManifestInvalid {
                line: i + 1,
                reason: format!("{}: intent_text required for text evaluation", e.sample_id),
            });
        }
    }

    let mut variants = cfg.variants.clone();
    variants.sort();
    variants.dedup();
    let jobs: Vec<(usize, usize)> = (0..cfg.seeds.len())
        .flat_map(|s| (0..manifest.entries.len()).map(move |e| (s, e)))
        .collect();

    let score_job = |&(seed_index, entry_index): &(usize, usize)| -> Vec<Scored> {
        let entry = &manifest.entries[entry_index];
        let intent = entry.intent_text.as_deref().unwrap_or_default();
        let class = entry.class_label;
        let seed = entry_seed(cfg.seeds[seed_index], &entry.sample_id);
        let scored = |system: &str, result: Result<(f64, f64), String>| Scored {
            system: system.to_string(),
            class,
            seed_index,
            sample_id: entry.sample_id.clone(),
            result,
        };
        let score = |candidate: &str| {
            score_pair(candidate, intent, backends.embedder.as_ref())
                .map(|s| (s.bleu, s.cosine))
                .map_err(|e| e.to_string())
        };

        let impaired = match &entry.impaired_text {
            Some(t) => Ok(t.clone()),
            None if class.is_impaired() => corrupt_text(intent, class, seed).map_err(|e| e.to_string()),
            None => Ok(intent.to_string()),
        };
        let impaired = match impaired {
            Ok(t) => t,
            Err(e) => {
                let mut out = vec![scored(IMPAIRED_ROW, Err(e.clone()))];
                out.extend(variants.iter().map(|v| scored(v.name(), Err(e.clone()))));
                return out;
            }
        };

        let mut out = vec![scored(IMPAIRED_ROW, score(&impaired))];
        for v in &variants {
            let refined = match v {
                RefinerVariant::Rule => rule_refine(&impaired, Some(class)).map_err(|e| e.to_string()),
                RefinerVariant::WithClass | RefinerVariant::WithoutClass => {
                    let c = (*v == RefinerVariant::WithClass).then_some(class);
                    refine_text(&impaired, c, backends.llm.as_ref(), templates, params)
                        .map(|o| o.refined_text)
                        .map_err(|e| e.to_string())
                }
            };
            out.push(scored(v.name(), refined.and_then(|t| score(&t))));
        }
        out
    };

    // Collecting keeps job order, so sums below run in a fixed order no
    // matter how many workers there are.
    let results: Vec<Vec<Scored>> = cfg.thread_pool()?.install(|| jobs.par_iter().map(score_job).collect());

    let mut classes: Vec<ImpairmentClass> = manifest.entries.iter().map(|e| e.class_label).collect();
    classes.sort_by_key(|c| c.index());
    classes.dedup();
    let systems: Vec<String> =
        std::iter::once(IMPAIRED_ROW.to_string()).chain(variants.iter().map(|v| v.name().to_string())).collect();

    type Key = (String, ImpairmentClass, usize);
    let mut sums: BTreeMap<Key, (f64, f64, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    for s in results.into_iter().flatten() {
        match s.result {
            Ok((bleu, cos)) => {
                let e = sums.entry((s.system, s.class, s.seed_index)).or_insert((0.0, 0.0, 0));
                e.0 += bleu;
                e.1 += cos;
                e.2 += 1;
            }
            Err(error) => failures.push(EntryFailure {
                sample_id: s.sample_id,
                system: s.system,
                seed: cfg.seeds[s.seed_index],
                error,
            }),
        }
    }

    let rows = systems
        .iter()
        .map(|system| TextRow {
            system: system.clone(),
            cells: classes
                .iter()
                .map(|&class| {
                    let per_seed: Vec<(f64, f64, usize)> = (0..cfg.seeds.len())
                        .filter_map(|k| sums.get(&(system.clone(), class, k)).copied())
                        .collect();
                    let bleu: Vec<f64> = per_seed.iter().map(|&(b, _, n)| b / n as f64).collect();
                    let cos: Vec<f64> = per_seed.iter().map(|&(_, c, n)| c / n as f64).collect();
                    TextCell {
                        class,
                        n: per_seed.iter().map(|p| p.2).min().unwrap_or(0),
                        bleu: MeanStd::of(&bleu),
                        cosine: MeanStd::of(&cos),
                    }
                })
                .collect(),
        })
        .collect();

    let embedder = backends.embedder.id().to_string();
    Ok(TextEvalReport {
        config: cfg.clone(),
        llm_backend: backends.llm.id().to_string(),
        embedder: embedder.clone(),
        n_entries: manifest.entries.len(),
        classes,
        rows,
        n_failed: failures.len(),
        failures,
        footnotes: vec![
            "BERT column omitted: token-level BERTScore is not computed.".into(),
            format!("CosSim is sentence-embedding cosine from `{embedder}`."),
            "Values are mean±std over seeds of the per-seed class mean.".into(),
        ],
    })
}
