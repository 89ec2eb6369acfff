//! Listening-test materials: blinded A/B pairs for raters, a separate key
//! for unblinding, and ingestion of completed rating sheets.
//!
//! Raters score the clarity of sample B (1 to 5) and how B compares with
//! A (-3 to +3). Whether B is the refined or the impaired clip is drawn per
//! pair, so the key is needed to turn ratings into per-condition means.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use speech_refine::sir::ImpairmentClass;

use crate::report::render_table;
use crate::BenchError;

pub const INSTRUCTIONS: &str = "Each item has two recordings, A and B, of the same person trying to say \
the same thing. Play both as often as you like. Then give two scores: how clear recording B is, on the \
1 to 5 scale, and how B compares with A, on the -3 to +3 scale. Judge both how the speech sounds and \
whether you can tell what the speaker wants to say.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub score: i32,
    pub label: String,
}

fn scale(points: &[(i32, &str)]) -> Vec<ScalePoint> {
    points.iter().map(|&(score, label)| ScalePoint { score, label: label.to_string() }).collect()
}

/// Clarity of one recording, from sound quality and ease of understanding.
pub fn clarity_scale() -> Vec<ScalePoint> {
    scale(&[
        (1, "Very unclear: the words are hard to make out and the message is lost."),
        (2, "Unclear: following the message takes real effort."),
        (3, "Fairly clear: the message gets across, but the delivery or wording is uneven."),
        (4, "Clear: well articulated and easy to follow."),
        (5, "Very clear: fluent and natural, the message is obvious at once."),
    ])
}

/// Comparison of recording B against recording A.
pub fn cmos_scale() -> Vec<ScalePoint> {
    scale(&[
        (-3, "B is far less clear than A."),
        (-2, "B is clearly less clear than A."),
        (-1, "B is a little less clear than A."),
        (0, "No difference you can hear."),
        (1, "B is a little clearer than A."),
        (2, "B is clearly clearer than A."),
        (3, "B is far clearer than A, and much easier to understand."),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

/// One pair as the rater sees it. File names carry no condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListeningPair {
    pub blinded_id: String,
    pub sample_a: String,
    pub sample_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningManifest {
    pub instructions: String,
    pub clarity_scale: Vec<ScalePoint>,
    pub cmos_scale: Vec<ScalePoint>,
    pub pairs: Vec<ListeningPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub blinded_id: String,
    pub sample_id: String,
    pub class_label: ImpairmentClass,
    pub system: String,
    pub refined_slot: Slot,
}

/// Unblinding key; keep it away from raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningKey {
    pub seed: u64,
    pub entries: Vec<KeyEntry>,
}

/// Audio for one pair before blinding.
#[derive(Debug, Clone)]
pub struct PairSource {
    pub sample_id: String,
    pub class_label: ImpairmentClass,
    pub system: String,
    pub impaired_wav: Vec<u8>,
    pub refined_wav: Vec<u8>,
}

/// Blinded materials plus the audio files to write next to the manifest.
#[derive(Debug, Clone)]
pub struct ListeningBundle {
    pub manifest: ListeningManifest,
    pub key: ListeningKey,
    /// `(file name, WAV bytes)`, named as in the manifest.
    pub files: Vec<(String, Vec<u8>)>,
}

/// Shuffles pair order, draws the A/B side of the refined clip and assigns
/// random ids, all from `seed`.
pub fn build_listening(sources: &[PairSource], seed: u64) -> ListeningBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut rng);
    let mut used = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(sources.len());
    let mut entries = Vec::with_capacity(sources.len());
    let mut files = Vec::with_capacity(2 * sources.len());
    for i in order {
        let src = &sources[i];
        let blinded_id = loop {
            let id = format!("p{:08x}", rng.random::<u32>());
            if used.insert(id.clone()) {
                break id;
            }
        };
        let refined_slot = if rng.random::<bool>() { Slot::B } else { Slot::A };
        let (a, b) = match refined_slot {
            Slot::A => (&src.refined_wav, &src.impaired_wav),
            Slot::B => (&src.impaired_wav, &src.refined_wav),
        };
        let (name_a, name_b) = (format!("{blinded_id}_A.wav"), format!("{blinded_id}_B.wav"));
        files.push((name_a.clone(), a.clone()));
        files.push((name_b.clone(), b.clone()));
        pairs.push(ListeningPair { blinded_id: blinded_id.clone(), sample_a: name_a, sample_b: name_b });
        entries.push(KeyEntry {
            blinded_id,
            sample_id: src.sample_id.clone(),
            class_label: src.class_label,
            system: src.system.clone(),
            refined_slot,
        });
    }
    ListeningBundle {
        manifest: ListeningManifest {
            instructions: INSTRUCTIONS.to_string(),
            clarity_scale: clarity_scale(),
            cmos_scale: cmos_scale(),
            pairs,
        },
        key: ListeningKey { seed, entries },
        files,
    }
}

/// Writes rater materials under `rater_dir` and the key to `key_path`,
/// which should live outside `rater_dir`.
pub fn write_bundle(bundle: &ListeningBundle, rater_dir: &Path, key_path: &Path) -> Result<(), BenchError> {
    let audio_dir = rater_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(BenchError::io(&audio_dir))?;
    for (name, bytes) in &bundle.files {
        let p = audio_dir.join(name);
        std::fs::write(&p, bytes).map_err(BenchError::io(&p))?;
    }
    let manifest_path = rater_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&bundle.manifest)?).map_err(BenchError::io(&manifest_path))?;

    let sheet_path = rater_dir.join("ratings_template.csv");
    let mut sheet = csv::Writer::from_path(&sheet_path)?;
    sheet.write_record(["blinded_id", "clarity", "cmos"])?;
    for pair in &bundle.manifest.pairs {
        sheet.write_record([pair.blinded_id.as_str(), "", ""])?;
    }
    sheet.flush().map_err(BenchError::io(&sheet_path))?;

    if let Some(parent) = key_path.parent() {
        std::fs::create_dir_all(parent).map_err(BenchError::io(parent))?;
    }
    std::fs::write(key_path, serde_json::to_vec_pretty(&bundle.key)?).map_err(BenchError::io(key_path))
}

#[derive(Debug, Clone, Deserialize)]
struct RatingRow {
    blinded_id: String,
    clarity: i32,
    cmos: i32,
}

/// Mean ratings for one class and system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub class_label: ImpairmentClass,
    pub system: String,
    pub n_ratings: usize,
    pub clarity_impaired: Option<f64>,
    pub clarity_refined: Option<f64>,
    /// Refined relative to impaired, whichever side it was played on.
    pub cmos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsReport {
    pub seed: u64,
    pub n_rows: usize,
    pub summaries: Vec<RatingSummary>,
}

impl RatingsReport {
    pub fn to_text(&self) -> String {
        let headers = ["class", "system", "n", "clarity impaired", "clarity refined", "C-MOS"].map(String::from);
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.2}"));
        let rows: Vec<Vec<String>> = self
            .summaries
            .iter()
            .map(|s| {
                vec![
                    s.class_label.to_string(),
                    s.system.clone(),
                    s.n_ratings.to_string(),
                    f(s.clarity_impaired),
                    f(s.clarity_refined),
                    format!("{:+.2}", s.cmos),
                ]
            })
            .collect();
        render_table(&headers, &rows)
    }
}

/// Unblinds a completed `blinded_id,clarity,cmos` sheet. Several raters
/// may contribute rows for the same pair.
pub fn ingest_ratings(csv_input: impl Read, key: &ListeningKey) -> Result<RatingsReport, BenchError> {
    let by_id: HashMap<&str, &KeyEntry> = key.entries.iter().map(|e| (e.blinded_id.as_str(), e)).collect();
    #[derive(Default)]
    struct Acc {
        n: usize,
        clarity_imp: Vec<f64>,
        clarity_ref: Vec<f64>,
        cmos: f64,
    }
    let mut acc: BTreeMap<(ImpairmentClass, String), Acc> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_input);
    let mut n_rows = 0;
    for (i, row) in reader.deserialize::<RatingRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| BenchError::ManifestInvalid { line, reason: e.to_string() })?;
        let entry = by_id.get(row.blinded_id.as_str()).ok_or_else(|| BenchError::ManifestInvalid {
            line,
            reason: format!("unknown blinded_id {:?}", row.blinded_id),
        })?;
        if !(1..=5).contains(&row.clarity) || !(-3..=3).contains(&row.cmos) {
            return Err(BenchError::ManifestInvalid {
                line,
                reason: format!("clarity must be 1..5 and cmos -3..3, got {} and {}", row.clarity, row.cmos),
            });
        }
        let a = acc.entry((entry.class_label, entry.system.clone())).or_default();
        a.n += 1;
        match entry.refined_slot {
            Slot::B => {
                a.clarity_ref.push(row.clarity as f64);
                a.cmos += row.cmos as f64;
            }
            Slot::A => {
                a.clarity_imp.push(row.clarity as f64);
                a.cmos -= row.cmos as f64;
            }
        }
        n_rows += 1;
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summaries = acc
        .into_iter()
        .map(|((class_label, system), a)| RatingSummary {
            class_label,
            system,
            n_ratings: a.n,
            clarity_impaired: mean(&a.clarity_imp),
            clarity_refined: mean(&a.clarity_ref),
            cmos: a.cmos / a.n as f64,
        })
        .collect();
    Ok(RatingsReport { seed: key.seed, n_rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sources(n: usize) -> Vec<PairSource> {
        (0..n)
            .map(|i| PairSource {
                sample_id: format!("s{i}"),
                class_label: ImpairmentClass::IMPAIRED[i % 3],
                system: "rule".into(),
                impaired_wav: vec![0, i as u8],
                refined_wav: vec![1, i as u8],
            })
            .collect()
    }

    #[test]
    fn one_pair_per_entry_and_seed_reproducible() {
        let a = build_listening(&sources(12), 3);
        let b = build_listening(&sources(12), 3);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.key, b.key);
        assert_eq!(a.manifest.pairs.len(), 12);
        assert_eq!(a.files.len(), 24);
        let refined_b = a.key.entries.iter().filter(|e| e.refined_slot == Slot::B).count();
        assert!(refined_b > 0 && refined_b < 12);
        assert_ne!(build_listening(&sources(12), 4).key, a.key);

        let manifest_text = serde_json::to_string(&a.manifest).unwrap();
        assert!(!manifest_text.contains("refined") && !manifest_text.contains("s1"));
    }

    #[test]
    fn ratings_are_unblinded() {
        let bundle = build_listening(&sources(2), 9);
        let mut csv_text = String::from("blinded_id,clarity,cmos\n");
        for e in &bundle.key.entries {
            // B is always rated 4 and better than A by 2.
            csv_text.push_str(&format!("{},4,2\n", e.blinded_id));
        }
        let report = ingest_ratings(csv_text.as_bytes(), &bundle.key).unwrap();
        assert_eq!(report.n_rows, 2);
        for s in &report.summaries {
            let e = bundle.key.entries.iter().find(|e| e.class_label == s.class_label).unwrap();
            let sign = if e.refined_slot == Slot::B { 1.0 } else { -1.0 };
            assert_eq!(s.cmos, 2.0 * sign);
        }
        let bad = format!("blinded_id,clarity,cmos\n{},6,0\n", bundle.key.entries[0].blinded_id);
        assert!(matches!(ingest_ratings(bad.as_bytes(), &bundle.key), Err(BenchError::ManifestInvalid { line: 2, .. })));
        assert!(ingest_ratings("blinded_id,clarity,cmos\nnope,3,0\n".as_bytes(), &bundle.key).is_err());
    }
}
