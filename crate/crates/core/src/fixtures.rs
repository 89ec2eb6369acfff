//! Deterministic synthetic data for tests, benches and demos.
//!
//! The four classes occupy disjoint spectral regions so a small classifier
//! can separate them. Healthy clips are mock-synthesiser renderings of
//! clean command sentences, which means refined speech coming out of the
//! mock synthesiser looks healthy too.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, AudioError, DspConfig, MelSpectrogram};
use crate::backends::{MockTts, StyleSpec};
use crate::refine::corrupt_text;
use crate::sir::{ImpairmentClass, LabeledDataset, LabeledItem};

pub const FIXTURE_RATE: u32 = 16_000;

const OPENERS: &[&str] = &["", "please ", "could you ", "can you "];
const ACTIONS: &[(&str, &[&str])] = &[
    ("play", &["some jazz", "my workout playlist", "the latest podcast", "relaxing music", "songs by the beatles"]),
    ("turn on", &["the kitchen lights", "the fan", "the radio", "the heater in the bedroom"]),
    ("turn off", &["the living room lamp", "the television", "all the lights"]),
    ("set", &["an alarm for seven", "a timer for ten minutes", "a reminder to call mom"]),
    ("book", &["a table for two tonight", "a taxi to the station", "a room for friday"]),
    ("add", &["milk to my shopping list", "this song to my favourites", "a meeting at noon"]),
    ("tell me", &["the weather in paris", "the time in tokyo", "a funny joke", "the news today"]),
    ("find", &["a movie playing nearby", "the nearest pharmacy", "a recipe for pancakes"]),
];

/// SNIPS-style spoken commands, built from fixed templates.
///
/// The first `n` sentences of the same infinite sequence are returned, so
/// `command_corpus(10)` is a prefix of `command_corpus(100)`.
pub fn command_corpus(n: usize) -> Vec<String> {
    let mut all = Vec::new();
    for opener in OPENERS {
        for (verb, objects) in ACTIONS {
            for object in objects.iter() {
                all.push(format!("{opener}{verb} {object}"));
            }
        }
    }
    // Interleave openers so short prefixes cover every verb.
    let per_opener = all.len() / OPENERS.len();
    let mut ordered = Vec::with_capacity(all.len());
    for i in 0..per_opener {
        for o in 0..OPENERS.len() {
            ordered.push(all[o * per_opener + (i + o * 3) % per_opener].clone());
        }
    }
    ordered.dedup();
    (0..n).map(|i| ordered[i % ordered.len()].clone()).collect()
}

/// One synthetic utterance with the text behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub class: ImpairmentClass,
    pub intent: String,
    /// What an ideal recogniser would hear: the intent, corrupted for
    /// impaired classes.
    pub transcript: String,
    #[serde(skip)]
    pub clip: Option<AudioClip>,
}

fn rng_for(class: ImpairmentClass, index: usize, seed: u64) -> ChaCha8Rng {
    let mix = seed ^ ((class.index() as u64 + 1) << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mix)
}

fn burst(out: &mut [f64], start: usize, len: usize, freq: f64, amp: f64) {
    let fade = (0.005 * FIXTURE_RATE as f64) as usize;
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let ramp = (i.min(len - 1 - i).min(fade) as f64) / fade.max(1) as f64;
        out[start + i] += amp * ramp * (2.0 * PI * freq * i as f64 / FIXTURE_RATE as f64).sin();
    }
}

fn to_clip(samples: Vec<f64>) -> Result<AudioClip, AudioError> {
    Ok(AudioClip::new(samples.into_iter().map(|s| s.clamp(-1.0, 1.0) as f32).collect(), FIXTURE_RATE)?.pcm16())
}

/// Low, slow, amplitude-wobbling voicing below 350 Hz.
fn dysarthric_audio(rng: &mut ChaCha8Rng) -> Result<AudioClip, AudioError> {
    let sr = FIXTURE_RATE as f64;
    let n = (rng.random_range(1.0..2.5) * sr) as usize;
    let f0 = rng.random_range(80.0..160.0);
    let am = rng.random_range(2.0..4.0);
    let wobble = rng.random_range(0.5..1.5);
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            phase += 2.0 * PI * f0 * (1.0 + 0.05 * (2.0 * PI * wobble * t).sin()) / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * am * t).sin();
            env * (0.35 * phase.sin() + 0.15 * (2.0 * phase).sin())
        })
        .collect();
    to_clip(samples)
}

/// Groups of short repeated bursts in the 2.2-3.2 kHz band.
fn stuttered_audio(rng: &mut ChaCha8Rng) -> Result<AudioClip, AudioError> {
    let sr = FIXTURE_RATE as f64;
    let n = (rng.random_range(1.0..2.5) * sr) as usize;
    let mut out = vec![0.0; n];
    let mut pos = (0.05 * sr) as usize;
    while pos < n {
        let freq = rng.random_range(2200.0..3200.0);
        let reps = rng.random_range(3..6);
        for _ in 0..reps {
            let len = (rng.random_range(0.05..0.08) * sr) as usize;
            burst(&mut out, pos, len, freq, 0.4);
            pos += len + (rng.random_range(0.04..0.07) * sr) as usize;
        }
        pos += (rng.random_range(0.1..0.2) * sr) as usize;
    }
    to_clip(out)
}

/// Sparse high tones in 4-6 kHz separated by long silences.
fn aphasic_audio(rng: &mut ChaCha8Rng) -> Result<AudioClip, AudioError> {
    let sr = FIXTURE_RATE as f64;
    let n = (rng.random_range(1.0..2.5) * sr) as usize;
    let mut out = vec![0.0; n];
    let mut pos = (rng.random_range(0.05..0.2) * sr) as usize;
    while pos < n {
        let len = (rng.random_range(0.2..0.4) * sr) as usize;
        burst(&mut out, pos, len, rng.random_range(4000.0..6000.0), 0.3);
        pos += len + (rng.random_range(0.3..0.6) * sr) as usize;
    }
    to_clip(out)
}

/// Synthesises item `index` of `class`. Identical arguments give identical output.
pub fn synthetic_item(class: ImpairmentClass, index: usize, seed: u64) -> Result<SyntheticItem, AudioError> {
    let mut rng = rng_for(class, index, seed);
    let corpus = command_corpus(index + 1);
    let intent = corpus[index].clone();
    let clip = match class {
        ImpairmentClass::Healthy => MockTts::render(&intent, &StyleSpec::default())
            .map_err(|e| AudioError::InvalidAudio(e.to_string()))?,
        ImpairmentClass::Dysarthria => dysarthric_audio(&mut rng)?,
        ImpairmentClass::Stutter => stuttered_audio(&mut rng)?,
        ImpairmentClass::Aphasia => aphasic_audio(&mut rng)?,
    };
    let transcript = if class.is_impaired() {
        corrupt_text(&intent, class, rng.random()).unwrap_or_else(|_| intent.clone())
    } else {
        intent.clone()
    };
    Ok(SyntheticItem { class, intent, transcript, clip: Some(clip) })
}

/// `per_class` items of every class, class-major.
pub fn synthetic_corpus(per_class: usize, seed: u64) -> Result<Vec<SyntheticItem>, AudioError> {
    let mut out = Vec::with_capacity(per_class * 4);
    for class in ImpairmentClass::ALL {
        for i in 0..per_class {
            out.push(synthetic_item(class, i, seed)?);
        }
    }
    Ok(out)
}

/// Log-Mel features for a synthetic corpus, labelled.
pub fn synthetic_dataset(per_class: usize, seed: u64, cfg: &DspConfig) -> Result<LabeledDataset, AudioError> {
    let front = crate::audio::MelFrontEnd::new(cfg)?;
    let items = synthetic_corpus(per_class, seed)?
        .into_iter()
        .map(|it| {
            let clip = it.clip.expect("synthesised items carry audio");
            Ok(LabeledItem { mel: front.compute(&clip)?, label: it.class })
        })
        .collect::<Result<Vec<_>, AudioError>>()?;
    Ok(LabeledDataset::new(items, seed))
}

/// Spectrograms holding one constant level per class (class k at
/// `-20 + 5k`), with small per-item jitter.
pub fn constant_level_dataset(per_class: usize, n_frames: usize, cfg: &DspConfig, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(per_class * 4);
    for class in ImpairmentClass::ALL {
        for _ in 0..per_class {
            let level = -20.0 + 5.0 * class.index() as f64 + rng.random_range(-0.5..0.5);
            let values = Array2::from_elem((cfg.n_mels, n_frames), level);
            let duration = n_frames as f64 / cfg.frame_rate();
            items.push(LabeledItem {
                mel: MelSpectrogram::from_values(values, cfg.frame_rate(), duration).expect("finite levels"),
                label: class,
            });
        }
    }
    LabeledDataset::new(items, seed)
}
