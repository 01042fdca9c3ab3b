//! Data augmentation, semantic-consistency filtering, confidence-weighted
//! training and pair-level evaluation for aspect category sentiment analysis
//! (ACSA).
//!
//! The crate is organised as a batch pipeline:
//!
//! - [`dataset`]: SemEval ABSA XML and canonical JSONL ingestion, corpus statistics.
//! - [`augment`]: prompt rendering and generation against a pluggable backend.
//! - [`filter`]: embedding cosine similarity and threshold-based retention.
//! - [`trainer`]: hashed-feature linear classifier trained with the
//!   confidence-weighted cross-entropy objective.
//! - [`eval`]: micro precision/recall/F1 and category-vs-sentiment error analysis.
//! - [`registry`]: name-keyed factories for generation backends and embedding
//!   providers, so a run can pick its strategies from configuration.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod filter;
pub mod hashing;
mod http;
pub mod registry;
pub mod trainer;

pub use augment::{AugmentedSample, GenerationBackend, GenerationConfig, PromptTemplate};
pub use dataset::{CategorySentimentPair, DatasetStats, Sentence, Sentiment};
pub use eval::{ErrorBreakdown, EvalReport};
pub use filter::{EmbeddingProvider, EmbeddingVector, FilterReport};
pub use registry::{BackendRegistry, EmbedderRegistry, ProviderSettings};
pub use trainer::{ModelParams, TrainConfig, TrainReport};
