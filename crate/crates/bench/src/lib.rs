//! Desk-scale evaluation harness for `speech-refine`.
//!
//! Every command reads a JSON-lines manifest, fans work out over a bounded
//! rayon pool and writes a JSON report plus an aligned text rendering of it.
//! Reports embed the [`EvalRunConfig`] that produced them.

pub mod fixtures;
pub mod listening;
pub mod manifest;
pub mod profile;
pub mod report;
pub mod speech_eval;
pub mod text_eval;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use speech_refine::backends::BackendsConfig;
use thiserror::Error;

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("manifest line {line}: {reason}")]
    ManifestInvalid { line: usize, reason: String },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("no trained classifier; pass --model")]
    MissingModel,
    #[error("server unreachable at {url}: {detail}")]
    ServerUnreachable { url: String, detail: String },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Audio(#[from] speech_refine::AudioError),
    #[error(transparent)]
    Sir(#[from] speech_refine::sir::SirError),
    #[error(transparent)]
    Pipeline(#[from] speech_refine::pipeline::PipelineError),
    #[error(transparent)]
    Backend(#[from] speech_refine::backends::BackendError),
    #[error(transparent)]
    Metric(#[from] speech_refine::metrics::MetricError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

/// How the impaired text is turned into refined text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum RefinerVariant {
    /// LLM prompt including the impairment description.
    WithClass,
    /// LLM prompt without the impairment description.
    WithoutClass,
    /// The offline rule refiner; needs no backend.
    Rule,
}

impl RefinerVariant {
    pub const ALL: [RefinerVariant; 3] = [Self::WithClass, Self::WithoutClass, Self::Rule];

    pub fn name(self) -> &'static str {
        match self {
            Self::WithClass => "with_class",
            Self::WithoutClass => "without_class",
            Self::Rule => "rule",
        }
    }
}

impl std::str::FromStr for RefinerVariant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BenchError::InvalidConfig(format!("unknown refiner variant {s:?}")))
    }
}

/// Everything needed to regenerate a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<RefinerVariant>,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 1 gives a strictly sequential run.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: RefinerVariant::ALL.to_vec(),
            backends: BackendsConfig::default(),
            out_dir: None,
            workers: default_workers(),
        }
    }
}

impl EvalRunConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(BenchError::InvalidConfig("at least one seed is required".into()));
        }
        if self.variants.is_empty() {
            return Err(BenchError::InvalidConfig("at least one refiner variant is required".into()));
        }
        if self.workers == 0 {
            return Err(BenchError::InvalidConfig("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool, BenchError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))
    }
}
