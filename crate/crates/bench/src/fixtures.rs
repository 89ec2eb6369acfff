//! Writes the synthetic corpus to disk as WAV files plus a manifest.

use std::path::Path;

use rayon::prelude::*;
use speech_refine::audio::{write_wav, AudioClip};
use speech_refine::backends::{MockTts, StyleSpec};
use speech_refine::fixtures::synthetic_item;
use speech_refine::sir::ImpairmentClass;

use crate::manifest::{write_manifest, ManifestEntry};
use crate::BenchError;

/// Writes `per_class` clips of every class under `dir/audio` and returns
/// the manifest written to `dir/manifest.jsonl`.
pub fn write_synthetic_fixture(dir: &Path, per_class: usize, seed: u64) -> Result<Vec<ManifestEntry>, BenchError> {
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(BenchError::io(&audio_dir))?;
    let jobs: Vec<(ImpairmentClass, usize)> =
        ImpairmentClass::ALL.iter().flat_map(|&c| (0..per_class).map(move |i| (c, i))).collect();
    let entries = jobs
        .par_iter()
        .map(|&(class, i)| {
            let item = synthetic_item(class, i, seed)?;
            let sample_id = format!("{class}_{i:04}");
            let rel = format!("audio/{sample_id}.wav");
            let clip = item.clip.as_ref().expect("synthetic items carry audio");
            let path = dir.join(&rel);
            std::fs::write(&path, write_wav(clip)).map_err(BenchError::io(&path))?;
            Ok(ManifestEntry {
                sample_id,
                class_label: class,
                audio_path: Some(rel.into()),
                intent_text: Some(item.intent),
                impaired_text: class.is_impaired().then_some(item.transcript),
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// A long clip for profiling: mock-synthesised sentences joined until
/// `duration_s` is reached, then trimmed to it.
pub fn long_clip(duration_s: f64) -> Result<AudioClip, BenchError> {
    let rate = speech_refine::backends::MOCK_TTS_RATE;
    let target = (duration_s * rate as f64).round() as usize;
    let mut samples = Vec::with_capacity(target);
    let sentences = speech_refine::fixtures::command_corpus(64);
    let mut i = 0;
    while samples.len() < target {
        let clip = MockTts::render(&sentences[i % sentences.len()], &StyleSpec::default())?;
        samples.extend_from_slice(clip.samples());
        i += 1;
    }
    samples.truncate(target);
    Ok(AudioClip::new(samples, rate)?)
}
