//! Semantic consistency filtering.
//!
//! Original and generated sentences are embedded by an [`EmbeddingProvider`];
//! a generated sentence is kept when the cosine similarity of the two
//! embeddings is at least the threshold `tau` (inclusive). `tau = 0` keeps
//! everything that could be scored.

mod providers;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedSample;
use crate::dataset::Sentence;

pub use providers::{embeddings_request_body, parse_embeddings_response, HashedBagOfWords, HttpEmbeddingProvider};

/// Default retention threshold.
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("sample references unknown sentence {0:?}")]
    UnknownOrigId(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid filter option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Rejects empty vectors and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self, FilterError> {
        if values.is_empty() {
            return Err(FilterError::InvalidEmbedding("empty vector".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(FilterError::InvalidEmbedding(format!("non-finite entry {bad}")));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Text to dense vector. Every call on one instance returns the same `dim`.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, FilterError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, FilterError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, FilterError> {
    if a.dim() != b.dim() {
        return Err(FilterError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(FilterError::ZeroVector);
    }
    Ok((dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0))
}

/// Retention rule: keep iff `similarity >= tau`.
pub fn retains(similarity: f64, tau: f64) -> bool {
    similarity >= tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    BelowThreshold,
    EmbeddingError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub orig_id: String,
    pub similarity: Option<f64>,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub tau: f64,
    pub n_input: usize,
    pub n_retained: usize,
    pub n_discarded: usize,
    pub discarded: Vec<Discarded>,
}

/// A sample's similarity to its original, or why it could not be scored.
pub type Score = Result<f64, String>;

/// Scores every sample against its original. Fails only when an `orig_id`
/// does not resolve; provider failures become per-sample `Err` scores.
/// Each distinct original is embedded once.
pub fn score_samples(
    samples: &[AugmentedSample],
    originals: &HashMap<String, Sentence>,
    provider: &dyn EmbeddingProvider,
    max_in_flight: usize,
) -> Result<Vec<Score>, FilterError> {
    if max_in_flight < 1 {
        return Err(FilterError::InvalidOption("max_in_flight must be >= 1".into()));
    }
    let mut orig_texts: BTreeMap<&str, &str> = BTreeMap::new();
    for sample in samples {
        let original = originals
            .get(&sample.orig_id)
            .ok_or_else(|| FilterError::UnknownOrigId(sample.orig_id.clone()))?;
        orig_texts.insert(sample.orig_id.as_str(), original.text.as_str());
    }

    let embed_checked = |text: &str| -> Result<EmbeddingVector, String> {
        let v = provider.embed(text).map_err(|e| e.to_string())?;
        if v.is_zero() {
            return Err(FilterError::ZeroVector.to_string());
        }
        Ok(v)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight)
        .build()
        .map_err(|e| FilterError::InvalidOption(e.to_string()))?;
    let scores = pool.install(|| {
        let orig_list: Vec<(&str, &str)> = orig_texts.into_iter().collect();
        let orig_vectors: HashMap<&str, Result<EmbeddingVector, String>> = orig_list
            .par_iter()
            .map(|(id, text)| (*id, embed_checked(text)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        samples
            .par_iter()
            .map(|sample| {
                let orig = orig_vectors[sample.orig_id.as_str()].as_ref().map_err(Clone::clone)?;
                let generated = embed_checked(&sample.generated_text)?;
                cosine_similarity(orig, &generated).map_err(|e| e.to_string())
            })
            .collect::<Vec<Score>>()
    });
    Ok(scores)
}

/// Applies the threshold to pre-computed scores. Retained samples carry their
/// similarity; the report lists discards in input order.
pub fn apply_threshold(
    samples: &[AugmentedSample],
    scores: &[Score],
    tau: f64,
) -> Result<(Vec<AugmentedSample>, FilterReport), FilterError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FilterError::InvalidThreshold(tau));
    }
    assert_eq!(samples.len(), scores.len(), "one score per sample");
    let mut retained = Vec::new();
    let mut report = FilterReport {
        tau,
        n_input: samples.len(),
        ..Default::default()
    };
    for (sample, score) in samples.iter().zip(scores) {
        match score {
            Ok(sim) if retains(*sim, tau) => retained.push(AugmentedSample {
                similarity: Some(*sim),
                ..sample.clone()
            }),
            Ok(sim) => report.discarded.push(Discarded {
                orig_id: sample.orig_id.clone(),
                similarity: Some(*sim),
                reason: DiscardReason::BelowThreshold,
            }),
            Err(message) => {
                log::warn!("discarding sample of {}: {message}", sample.orig_id);
                report.discarded.push(Discarded {
                    orig_id: sample.orig_id.clone(),
                    similarity: None,
                    reason: DiscardReason::EmbeddingError,
                });
            }
        }
    }
    report.n_retained = retained.len();
    report.n_discarded = report.discarded.len();
    Ok((retained, report))
}

/// Scores and thresholds in one step.
pub fn filter_augmented(
    samples: &[AugmentedSample],
    originals: &HashMap<String, Sentence>,
    tau: f64,
    provider: &dyn EmbeddingProvider,
    max_in_flight: usize,
) -> Result<(Vec<AugmentedSample>, FilterReport), FilterError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FilterError::InvalidThreshold(tau));
    }
    let scores = score_samples(samples, originals, provider, max_in_flight)?;
    apply_threshold(samples, &scores, tau)
}

/// Index sentences by id for [`filter_augmented`].
pub fn index_by_id(sentences: &[Sentence]) -> HashMap<String, Sentence> {
    sentences.iter().map(|s| (s.id.clone(), s.clone())).collect()
}
