use serde::{Deserialize, Serialize};

use super::{fnv1a64, BackendError, Embedder};

pub const EMBEDDING_DIM: usize = 2048;

/// A text embedding. Unit length unless `is_empty` is set, in which case
/// every component is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub is_empty: bool,
}

impl Embedding {
    pub fn zero(dim: usize) -> Self {
        Self { values: vec![0.0; dim], is_empty: true }
    }

    /// L2-normalises `values`; an all-zero input yields the flagged zero vector.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self::zero(values.len());
        }
        Self { values: values.into_iter().map(|v| v / norm).collect(), is_empty: false }
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Hashed character-trigram term frequencies, L2-normalised.
///
/// Text is lowercased first. Strings shorter than three characters count as
/// a single gram. Buckets are FNV-1a of the gram's UTF-8 bytes modulo
/// [`EMBEDDING_DIM`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

impl TrigramEmbedder {
    pub fn bucket(gram: &str) -> usize {
        (fnv1a64(gram.as_bytes()) % EMBEDDING_DIM as u64) as usize
    }

    pub fn counts(text: &str) -> Vec<f64> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut counts = vec![0.0; EMBEDDING_DIM];
        if chars.is_empty() {
            return counts;
        }
        if chars.len() < 3 {
            counts[Self::bucket(&chars.iter().collect::<String>())] += 1.0;
            return counts;
        }
        for w in chars.windows(3) {
            counts[Self::bucket(&w.iter().collect::<String>())] += 1.0;
        }
        counts
    }
}

impl Embedder for TrigramEmbedder {
    fn id(&self) -> &str {
        "trigram-2048"
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        Ok(Embedding::normalized(Self::counts(text)))
    }
}
