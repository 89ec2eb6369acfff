//! JSON-lines dataset manifests.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speech_refine::audio::{load_wav, AudioClip};
use speech_refine::sir::ImpairmentClass;

use crate::BenchError;

/// One utterance. Audio paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub class_label: ImpairmentClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impaired_text: Option<String>,
}

impl ManifestEntry {
    fn check(&self) -> Result<(), String> {
        if self.sample_id.trim().is_empty() {
            return Err("empty sample_id".into());
        }
        let blank = |s: &Option<String>| s.as_deref().is_none_or(|t| t.trim().is_empty());
        if self.audio_path.is_none() && blank(&self.intent_text) && blank(&self.impaired_text) {
            return Err(format!("{}: needs audio_path, intent_text or impaired_text", self.sample_id));
        }
        Ok(())
    }
}

/// A parsed manifest and the directory relative paths are resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self { entries, base_dir: base_dir.into() }
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.audio_path.as_ref().map(|p| if p.is_absolute() { p.clone() } else { self.base_dir.join(p) })
    }

    /// Decodes the entry's audio file.
    pub fn load_audio(&self, entry: &ManifestEntry) -> Result<AudioClip, BenchError> {
        let path = self.audio_path(entry).ok_or_else(|| BenchError::ManifestInvalid {
            line: self.line_of(entry),
            reason: format!("{}: audio_path required", entry.sample_id),
        })?;
        let bytes = std::fs::read(&path).map_err(BenchError::io(&path))?;
        Ok(load_wav(&bytes)?)
    }

    fn line_of(&self, entry: &ManifestEntry) -> usize {
        self.entries.iter().position(|e| e.sample_id == entry.sample_id).map_or(0, |i| i + 1)
    }
}

/// Parses a manifest from any reader. Blank lines are skipped; sample ids
/// must be unique.
pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestEntry>, BenchError> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| BenchError::ManifestInvalid { line: line_no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| BenchError::ManifestInvalid { line: line_no, reason: e.to_string() })?;
        entry.check().map_err(|reason| BenchError::ManifestInvalid { line: line_no, reason })?;
        if !seen.insert(entry.sample_id.clone()) {
            return Err(BenchError::ManifestInvalid {
                line: line_no,
                reason: format!("duplicate sample_id {:?}", entry.sample_id),
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(BenchError::ManifestInvalid { line: 0, reason: "manifest has no entries".into() });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, BenchError> {
    let file = std::fs::File::open(path).map_err(BenchError::io(path))?;
    let entries = parse_manifest(BufReader::new(file))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { entries, base_dir })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), BenchError> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(BenchError::io(path))?;
    file.write_all(&out).map_err(BenchError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lines_with_their_number() {
        let text = "{\"sample_id\":\"a\",\"class_label\":\"stutter\",\"intent_text\":\"hi\"}\n\n{\"sample_id\":\"b\",\"class_label\":\"stutter\"}\n";
        match parse_manifest(text.as_bytes()) {
            Err(BenchError::ManifestInvalid { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let dup = "{\"sample_id\":\"a\",\"class_label\":\"healthy\",\"intent_text\":\"x\"}\n{\"sample_id\":\"a\",\"class_label\":\"healthy\",\"intent_text\":\"y\"}";
        assert!(matches!(parse_manifest(dup.as_bytes()), Err(BenchError::ManifestInvalid { line: 2, .. })));
        assert!(parse_manifest("{\"sample_id\":\"a\",\"class_label\":\"mumble\",\"intent_text\":\"x\"}".as_bytes()).is_err());
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry {
                sample_id: "s1".into(),
                class_label: ImpairmentClass::Aphasia,
                audio_path: Some("audio/s1.wav".into()),
                intent_text: Some("play some jazz".into()),
                impaired_text: None,
            },
            ManifestEntry {
                sample_id: "s2".into(),
                class_label: ImpairmentClass::Healthy,
                audio_path: None,
                intent_text: None,
                impaired_text: Some("um hello".into()),
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.entries, entries);
        assert_eq!(m.audio_path(&entries[0]).unwrap(), dir.path().join("audio/s1.wav"));
        assert!(m.audio_path(&entries[1]).is_none());
    }
}
