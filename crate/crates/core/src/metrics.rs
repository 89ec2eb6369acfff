//! Refinement-quality metrics: sentence BLEU, embedding cosine similarity
//! and the classifier-based recovery rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, DspConfig};
use crate::backends::{BackendError, Embedder};
use crate::sir::{ImpairmentClass, SirError, SirModel, SirPredictor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("no inputs to score")]
    EmptyInput,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sir(#[from] SirError),
}

/// Lowercase, then split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// A zero match count is replaced by 0.1.
    AddEps,
}

const SMOOTHING_EPS: f64 = 0.1;

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions and brevity penalty.
///
/// Orders for which the candidate has no n-grams at all (it is shorter than
/// `n`) are left out of the geometric mean, so a short sentence still
/// scores 1 against itself.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize, smoothing: Smoothing) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n.max(1) {
        if candidate.len() < n {
            break;
        }
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let total = candidate.len() + 1 - n;
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        let precision = match (matched, smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::AddEps) => SMOOTHING_EPS / total as f64,
            (m, _) => m as f64 / total as f64,
        };
        log_sum += precision.ln();
        orders += 1;
    }
    let brevity = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    Ok((brevity * (log_sum / orders as f64).exp()).clamp(0.0, 1.0))
}

/// BLEU-4 without smoothing on raw strings.
pub fn bleu_text(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    bleu(&tokenize(candidate), &tokenize(reference), 4, Smoothing::None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineScore {
    pub value: f64,
    /// Set when either side embedded to the zero vector.
    pub degenerate: bool,
}

pub fn cosine_sim(a: &str, b: &str, embedder: &dyn Embedder) -> Result<CosineScore, MetricError> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    if ea.is_empty || eb.is_empty {
        return Ok(CosineScore { value: 0.0, degenerate: true });
    }
    Ok(CosineScore { value: ea.dot(&eb).clamp(-1.0, 1.0), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPairScore {
    pub candidate: String,
    pub reference: String,
    pub bleu: f64,
    pub cosine: f64,
}

pub fn score_pair(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<TextPairScore, MetricError> {
    Ok(TextPairScore {
        candidate: candidate.to_string(),
        reference: reference.to_string(),
        bleu: bleu_text(candidate, reference)?,
        cosine: cosine_sim(candidate, reference, embedder)?.value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub n_total: usize,
    pub n_recovered: usize,
    pub rate_percent: f64,
}

impl RecoveryReport {
    pub fn from_labels(labels: &[ImpairmentClass]) -> Result<Self, MetricError> {
        if labels.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        let n_recovered = labels.iter().filter(|&&l| l == ImpairmentClass::Healthy).count();
        Ok(Self {
            n_total: labels.len(),
            n_recovered,
            rate_percent: 100.0 * n_recovered as f64 / labels.len() as f64,
        })
    }
}

/// Share of clips the classifier labels healthy.
pub fn recovery_rate(clips: &[AudioClip], model: &SirModel, cfg: &DspConfig) -> Result<RecoveryReport, MetricError> {
    if clips.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let predictor = SirPredictor::new(std::sync::Arc::new(model.clone()), cfg)?;
    let labels = clips
        .iter()
        .map(|c| predictor.predict(c).map(|p| p.label))
        .collect::<Result<Vec<_>, _>>()?;
    RecoveryReport::from_labels(&labels)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: values.len() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.2}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::TrigramEmbedder;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(toks("Play SOME-jazz, now!"), vec!["play", "some", "jazz", "now"]);
        assert!(toks("...").is_empty());
    }

    #[test]
    fn bleu_anchor_cases() {
        assert_eq!(bleu_text("the cat sat on the mat", "the cat sat on the mat").unwrap(), 1.0);
        assert_eq!(bleu_text("hi", "hi").unwrap(), 1.0);
        assert_eq!(bleu_text("dog runs", "the cat").unwrap(), 0.0);
        assert_eq!(bleu(&toks("the the the"), &toks("the cat"), 4, Smoothing::None).unwrap(), 0.0);
        assert!(matches!(bleu_text("x", ""), Err(MetricError::EmptyReference)));
        assert_eq!(bleu_text("", "x").unwrap(), 0.0);
    }

    #[test]
    fn clipped_unigram_precision_with_smoothing() {
        // p1 = 1/3 (clipped), p2 = 0 -> eps/2, p3 = 0 -> eps/1; BP = 1.
        let got = bleu(&toks("the the the"), &toks("the cat"), 4, Smoothing::AddEps).unwrap();
        let expected = ((1.0f64 / 3.0).ln() + (0.1f64 / 2.0).ln() + 0.1f64.ln()) / 3.0;
        assert!((got - expected.exp()).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        let got = bleu_text("the cat", "the cat sat on the mat").unwrap();
        assert!((got - (1.0f64 - 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let e = TrigramEmbedder;
        let same = cosine_sim("play some jazz", "play some jazz", &e).unwrap();
        assert!((same.value - 1.0).abs() < 1e-9);
        assert_eq!(cosine_sim("abc", "xyz", &e).unwrap().value, 0.0);
        let d = cosine_sim("", "abc", &e).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
        let ab = cosine_sim("turn on the lights", "turn the lights off", &e).unwrap().value;
        let ba = cosine_sim("turn the lights off", "turn on the lights", &e).unwrap().value;
        assert_eq!(ab, ba);
    }

    #[test]
    fn recovery_arithmetic() {
        use ImpairmentClass::*;
        let r = RecoveryReport::from_labels(&[Healthy, Healthy, Stutter, Healthy, Aphasia]).unwrap();
        assert_eq!((r.n_total, r.n_recovered, r.rate_percent), (5, 3, 60.0));
        assert_eq!(RecoveryReport::from_labels(&[Stutter, Aphasia]).unwrap().rate_percent, 0.0);
        assert_eq!(RecoveryReport::from_labels(&[Healthy; 4]).unwrap().rate_percent, 100.0);
        assert!(RecoveryReport::from_labels(&[]).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.5; 5]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    proptest! {
        #[test]
        fn bleu_bounded_and_case_invariant(a in "[a-zA-Z ]{1,40}", b in "[a-zA-Z ]{1,40}") {
            prop_assume!(!tokenize(&b).is_empty());
            let s = bleu_text(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, bleu_text(&a.to_uppercase(), &b.to_lowercase()).unwrap());
            if !tokenize(&a).is_empty() {
                prop_assert_eq!(bleu_text(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn trigram_cosine_in_unit_interval(a in ".{0,30}", b in ".{0,30}") {
            let c = cosine_sim(&a, &b, &TrigramEmbedder).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
