//! Prompt rendering and LLM-backed sentence generation.
//!
//! Each labeled sentence is rendered into a structured prompt that asks for a
//! rewrite preserving the listed category-sentiment pairs. The generated text
//! is paired with the original labels verbatim; labels are never re-derived
//! from the generated sentence.

mod backends;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{PairSet, Sentence};
use crate::hashing::stable_hash;

pub use backends::{
    chat_request_body, parse_chat_response, CorruptingMock, HttpChatBackend, MockParaphraser,
    API_KEY_ENV,
};

pub const ORIGINAL_SENTENCE: &str = "{ORIGINAL_SENTENCE}";
pub const PAIR_LIST: &str = "{PAIR_LIST}";
pub const CATEGORY: &str = "{CATEGORY}";
pub const SENTIMENT: &str = "{SENTIMENT}";

/// Default instruction text. The sentence sits on its own `Sentence:` line,
/// which is also where the mock backends look for it.
pub const DEFAULT_TEMPLATE: &str = "\
Rewrite the sentence below so that it uses different wording and a different sentence structure while keeping its original meaning.
The rewritten sentence must still express every aspect category and sentiment polarity listed below, and must not introduce any new ones.

Sentence: {ORIGINAL_SENTENCE}
Aspect categories and sentiments: {PAIR_LIST}

Reply with the rewritten sentence only, on a single line, without quotes or explanations.";

pub const DEFAULT_PAIR_FORMAT: &str = "{CATEGORY} is {SENTIMENT}";
pub const DEFAULT_PAIR_SEPARATOR: &str = "; ";

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("sentence {0:?} has no category-sentiment pairs")]
    Unlabeled(String),
    #[error("sentence {orig_id:?}: backend failed after {attempts} attempt(s): {message}")]
    Backend {
        orig_id: String,
        attempts: u32,
        message: String,
    },
    #[error("sentence {orig_id:?}: backend returned an empty generation after {attempts} attempt(s)")]
    EmptyGeneration { orig_id: String, attempts: u32 },
}

// ---------------------------------------------------------------------------
// Template
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    pub template_text: String,
    pub pair_format: String,
    pub pair_separator: String,
}

#[derive(Deserialize)]
struct RawTemplate {
    template_text: String,
    pair_format: String,
    pair_separator: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = AugmentError;

    fn try_from(raw: RawTemplate) -> Result<Self, AugmentError> {
        PromptTemplate::new(raw.template_text, raw.pair_format, raw.pair_separator)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE, DEFAULT_PAIR_FORMAT, DEFAULT_PAIR_SEPARATOR)
            .expect("default template is valid")
    }
}

fn require_once(text: &str, placeholder: &str, what: &str) -> Result<(), AugmentError> {
    match text.matches(placeholder).count() {
        1 => Ok(()),
        n => Err(AugmentError::InvalidTemplate(format!(
            "{what} must contain {placeholder} exactly once, found {n}"
        ))),
    }
}

impl PromptTemplate {
    pub fn new(
        template_text: impl Into<String>,
        pair_format: impl Into<String>,
        pair_separator: impl Into<String>,
    ) -> Result<Self, AugmentError> {
        let template = Self {
            template_text: template_text.into(),
            pair_format: pair_format.into(),
            pair_separator: pair_separator.into(),
        };
        require_once(&template.template_text, ORIGINAL_SENTENCE, "template_text")?;
        require_once(&template.template_text, PAIR_LIST, "template_text")?;
        require_once(&template.pair_format, CATEGORY, "pair_format")?;
        require_once(&template.pair_format, SENTIMENT, "pair_format")?;
        Ok(template)
    }
}

/// Substitutes each `(placeholder, value)` in a single pass, so placeholder
/// text appearing inside a value is left alone.
fn substitute(text: &str, replacements: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        let next = replacements
            .iter()
            .filter_map(|(key, value)| rest.find(key).map(|pos| (pos, *key, *value)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            Some((pos, key, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + key.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// Renders the generation prompt for `sentence`. Pairs are listed sorted by
/// category then sentiment name, so the prompt does not depend on input
/// order.
pub fn render_prompt(sentence: &Sentence, template: &PromptTemplate) -> Result<String, AugmentError> {
    if sentence.pairs.is_empty() {
        return Err(AugmentError::Unlabeled(sentence.id.clone()));
    }
    let ordered: BTreeSet<(&str, &str)> = sentence
        .pairs
        .iter()
        .map(|p| (p.category.as_str(), p.sentiment.as_str()))
        .collect();
    let rendered_pairs: Vec<String> = ordered
        .into_iter()
        .map(|(category, sentiment)| {
            substitute(&template.pair_format, &[(CATEGORY, category), (SENTIMENT, sentiment)])
        })
        .collect();
    let pair_list = rendered_pairs.join(&template.pair_separator);
    Ok(substitute(
        &template.template_text,
        &[(ORIGINAL_SENTENCE, sentence.text.as_str()), (PAIR_LIST, pair_list.as_str())],
    ))
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub n_per_sentence: usize,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout: Duration,
    pub model_name: String,
    /// Base seed. Each (sentence, attempt index) derives its own seed from it.
    pub seed: u64,
    /// Delay before the first retry; doubles on each further retry.
    pub retry_backoff: Duration,
    /// Upper bound on concurrent backend calls.
    pub max_in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_per_sentence: 1,
            temperature: 0.7,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            model_name: "gpt-4o".into(),
            seed: 0,
            retry_backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.n_per_sentence < 1 {
            return Err(AugmentError::InvalidConfig("n_per_sentence must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(AugmentError::InvalidConfig("temperature must be finite and >= 0".into()));
        }
        if self.max_in_flight < 1 {
            return Err(AugmentError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient,
    Permanent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Transient,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Permanent,
            message: message.into(),
        }
    }
}

/// A text generator: one prompt in, one sentence out.
///
/// `seed` is derived per (sentence, attempt index). Deterministic backends
/// must return the same output for the same `(prompt, seed)`.
pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, prompt: &str, config: &GenerationConfig, seed: u64) -> Result<String, BackendError>;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub orig_id: String,
    pub generated_text: String,
    pub pairs: PairSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    pub backend_id: String,
}

impl AugmentedSample {
    /// Turns the sample into a training sentence with id `<orig_id>#aug<k>`.
    pub fn to_sentence(&self, k: usize) -> Sentence {
        Sentence {
            id: format!("{}#aug{k}", self.orig_id),
            text: self.generated_text.clone(),
            pairs: self.pairs.clone(),
        }
    }
}

/// Keeps the first non-empty line, trimmed, without surrounding quotes.
pub fn clean_generation(raw: &str) -> Option<String> {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
    let mut text = line;
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('`', '`')] {
        if text.len() >= open.len_utf8() + close.len_utf8()
            && text.starts_with(open)
            && text.ends_with(close)
        {
            text = text[open.len_utf8()..text.len() - close.len_utf8()].trim();
            break;
        }
    }
    (!text.is_empty()).then(|| text.to_string())
}

/// Seed used for attempt `index` of sentence `orig_id`.
pub fn sample_seed(base_seed: u64, orig_id: &str, index: usize) -> u64 {
    let mut key = orig_id.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&(index as u64).to_le_bytes());
    stable_hash(base_seed, &key)
}

/// Generates one augmented sample (attempt index 0).
pub fn generate_one(
    sentence: &Sentence,
    backend: &dyn GenerationBackend,
    template: &PromptTemplate,
    config: &GenerationConfig,
) -> Result<AugmentedSample, AugmentError> {
    generate_indexed(sentence, 0, backend, template, config)
}

/// Generates the `index`-th sample for `sentence`, retrying transient
/// failures and empty outputs up to `config.max_retries` times with
/// exponential backoff.
pub fn generate_indexed(
    sentence: &Sentence,
    index: usize,
    backend: &dyn GenerationBackend,
    template: &PromptTemplate,
    config: &GenerationConfig,
) -> Result<AugmentedSample, AugmentError> {
    let prompt = render_prompt(sentence, template)?;
    let seed = sample_seed(config.seed, &sentence.id, index);
    let mut delay = config.retry_backoff;
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let retryable = match backend.generate(&prompt, config, seed) {
            Ok(raw) => match clean_generation(&raw) {
                Some(text) => {
                    return Ok(AugmentedSample {
                        orig_id: sentence.id.clone(),
                        generated_text: text,
                        pairs: sentence.pairs.clone(),
                        similarity: None,
                        backend_id: backend.id().to_string(),
                    })
                }
                None => AugmentError::EmptyGeneration {
                    orig_id: sentence.id.clone(),
                    attempts,
                },
            },
            Err(err) => {
                let failure = AugmentError::Backend {
                    orig_id: sentence.id.clone(),
                    attempts,
                    message: err.message,
                };
                if err.kind == FailureKind::Permanent {
                    return Err(failure);
                }
                failure
            }
        };
        if attempts > config.max_retries {
            return Err(retryable);
        }
        log::debug!("retrying {} after: {retryable}", sentence.id);
        if !delay.is_zero() {
            std::thread::sleep(delay);
            delay = delay.saturating_mul(2);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub orig_id: String,
    pub attempt_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub n_input: usize,
    pub n_unlabeled_skipped: usize,
    pub n_attempted: usize,
    pub n_generated: usize,
    pub failures: Vec<GenerationFailure>,
}

impl AugmentReport {
    pub fn failed_ids(&self) -> BTreeSet<&str> {
        self.failures.iter().map(|f| f.orig_id.as_str()).collect()
    }
}

/// Attempts `n_per_sentence` generations for every labeled sentence, at most
/// `max_in_flight` at a time. Output is sorted by (orig_id, attempt index)
/// whatever order the calls finish in. Failures are reported, never fatal.
pub fn augment_dataset(
    dataset: &[Sentence],
    backend: &dyn GenerationBackend,
    template: &PromptTemplate,
    config: &GenerationConfig,
) -> Result<(Vec<AugmentedSample>, AugmentReport), AugmentError> {
    config.validate()?;
    let labeled: Vec<&Sentence> = dataset.iter().filter(|s| s.is_labeled()).collect();
    let mut jobs: Vec<(&Sentence, usize)> = labeled
        .iter()
        .flat_map(|s| (0..config.n_per_sentence).map(move |k| (*s, k)))
        .collect();
    jobs.sort_by(|a, b| a.0.id.cmp(&b.0.id).then(a.1.cmp(&b.1)));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight)
        .build()
        .map_err(|e| AugmentError::InvalidConfig(e.to_string()))?;
    let results: Vec<Result<AugmentedSample, AugmentError>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(sentence, k)| generate_indexed(sentence, *k, backend, template, config))
            .collect()
    });

    let mut report = AugmentReport {
        n_input: dataset.len(),
        n_unlabeled_skipped: dataset.len() - labeled.len(),
        n_attempted: jobs.len(),
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(jobs.len());
    for ((sentence, k), result) in jobs.iter().zip(results) {
        match result {
            Ok(sample) => samples.push(sample),
            Err(err) => {
                log::warn!("generation failed: {err}");
                report.failures.push(GenerationFailure {
                    orig_id: sentence.id.clone(),
                    attempt_index: *k,
                    error: err.to_string(),
                });
            }
        }
    }
    report.n_generated = samples.len();
    Ok((samples, report))
}
