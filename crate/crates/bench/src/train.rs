//! Classifier training from a manifest, with a held-out evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use speech_refine::audio::DspConfig;
use speech_refine::sir::{evaluate, train, EvalReport, ImpairmentClass, LabeledDataset, LabeledItem, SirModel, SirPredictor, TrainHyper};

use crate::manifest::Manifest;
use crate::report::{fmt_opt, render_table};
use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub hyper: TrainHyper,
    pub test_fraction: f64,
    pub min_per_class: usize,
    pub split_seed: u64,
    pub dsp: DspConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { hyper: TrainHyper::default(), test_fraction: 0.1, min_per_class: 20, split_seed: 0, dsp: DspConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub settings: TrainSettings,
    pub n_train: usize,
    pub n_test: usize,
    pub class_counts: [usize; 4],
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval: EvalReport,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let headers = ["class", "n", "Acc %", "F1", "AUC"].map(String::from);
        let mut rows: Vec<Vec<String>> = self
            .eval
            .per_class
            .iter()
            .map(|m| {
                vec![
                    m.class.to_string(),
                    m.support.to_string(),
                    format!("{:.1}", 100.0 * m.accuracy),
                    format!("{:.3}", m.f1),
                    fmt_opt(m.auc, 3),
                ]
            })
            .collect();
        let o = &self.eval.overall;
        rows.push(vec![
            "overall".into(),
            self.eval.n_items.to_string(),
            format!("{:.1}", 100.0 * o.accuracy),
            format!("{:.3}", o.f1),
            fmt_opt(o.auc, 3),
        ]);
        let mut text = render_table(&headers, &rows);
        text.push_str(&format!(
            "\ntrain {} / test {}; loss {:.4} -> {:.4}\n* Acc is per-class recall; overall is the macro average.\n",
            self.n_train, self.n_test, self.initial_loss, self.final_loss
        ));
        text
    }
}

/// Loads, resamples and featurises every entry with audio.
pub fn dataset_from_manifest(
    manifest: &Manifest,
    dsp: &DspConfig,
    split_seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<LabeledDataset, BenchError> {
    let with_audio: Vec<_> = manifest.entries.iter().filter(|e| e.audio_path.is_some()).collect();
    let front = speech_refine::MelFrontEnd::new(dsp)?;
    let items = pool.install(|| {
        with_audio
            .par_iter()
            .map(|e| {
                let clip = manifest.load_audio(e)?;
                let clip = if clip.sample_rate() == dsp.target_rate {
                    clip
                } else {
                    speech_refine::audio::resample(&clip, dsp.target_rate)?
                };
                Ok(LabeledItem { mel: front.compute(&clip)?, label: e.class_label })
            })
            .collect::<Result<Vec<_>, BenchError>>()
    })?;
    Ok(LabeledDataset::new(items, split_seed))
}

/// Stratified split, training and held-out evaluation.
pub fn train_and_evaluate(data: &LabeledDataset, settings: &TrainSettings) -> Result<(SirModel, TrainReport), BenchError> {
    let counts = data.class_counts();
    if let Some(c) = ImpairmentClass::ALL.into_iter().find(|c| counts[c.index()] < settings.min_per_class) {
        return Err(BenchError::InsufficientData(format!(
            "{c} has {} clips, need at least {}",
            counts[c.index()],
            settings.min_per_class
        )));
    }
    let data = LabeledDataset::new(data.items.clone(), settings.split_seed);
    let (train_set, test_set) = data.stratified_split(settings.test_fraction);
    let outcome = train(&train_set, &settings.hyper, &settings.dsp.fingerprint())?;
    // Confirms the model accepts the configured front end.
    SirPredictor::new(std::sync::Arc::new(outcome.model.clone()), &settings.dsp)?;
    let eval = evaluate(&outcome.model, &test_set)?;
    let report = TrainReport {
        settings: settings.clone(),
        n_train: train_set.len(),
        n_test: test_set.len(),
        class_counts: counts,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        eval,
    };
    Ok((outcome.model, report))
}
