use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{BackendError, GenerationBackend, GenerationConfig};
use crate::hashing::{stable_hash, tokenize};

/// Environment variable holding the API key for HTTP backends.
pub const API_KEY_ENV: &str = "ACSA_FORGE_API_KEY";

fn call_rng(backend_seed: u64, call_seed: u64, prompt: &str) -> ChaCha8Rng {
    let mut key = call_seed.to_le_bytes().to_vec();
    key.extend_from_slice(prompt.as_bytes());
    ChaCha8Rng::seed_from_u64(stable_hash(backend_seed, &key))
}

/// The text on the prompt's `Sentence:` line, or the whole prompt.
fn original_sentence(prompt: &str) -> &str {
    prompt
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("Sentence:"))
        .map(str::trim)
        .unwrap_or_else(|| prompt.trim())
}

const SYNONYMS: &[(&str, &str)] = &[
    ("amazing", "wonderful"),
    ("awful", "terrible"),
    ("bad", "poor"),
    ("beautiful", "lovely"),
    ("best", "finest"),
    ("big", "large"),
    ("cheap", "inexpensive"),
    ("clean", "tidy"),
    ("computer", "machine"),
    ("delicious", "tasty"),
    ("dirty", "filthy"),
    ("disappointing", "underwhelming"),
    ("excellent", "superb"),
    ("expensive", "pricey"),
    ("fast", "quick"),
    ("food", "cuisine"),
    ("friendly", "welcoming"),
    ("good", "fine"),
    ("great", "excellent"),
    ("horrible", "dreadful"),
    ("laptop", "notebook"),
    ("large", "big"),
    ("love", "adore"),
    ("loved", "adored"),
    ("nice", "pleasant"),
    ("noisy", "loud"),
    ("perfect", "flawless"),
    ("place", "spot"),
    ("pleasant", "nice"),
    ("price", "cost"),
    ("prices", "costs"),
    ("quick", "fast"),
    ("quiet", "calm"),
    ("restaurant", "eatery"),
    ("rude", "impolite"),
    ("screen", "display"),
    ("slow", "sluggish"),
    ("small", "tiny"),
    ("staff", "team"),
    ("tasty", "delicious"),
    ("terrible", "awful"),
    ("very", "really"),
    ("waiter", "server"),
    ("worst", "poorest"),
];

const OPENERS: &[&str] = &["Honestly,", "Overall,", "Frankly,", "Admittedly,"];
const CLOSERS: &[&str] = &["truly", "really", "honestly", "definitely"];
const DRIFT_CLAUSES: &[&str] = &[
    "and that was about it for the evening",
    "which is what most people would expect anyway",
    "so we will see how things go next time",
    "as far as anyone could tell at the time",
];

/// Probability that a call drifts: the second half of the sentence is
/// replaced by a generic clause, as weak paraphrasers sometimes do.
pub const MOCK_DRIFT_PROBABILITY: f64 = 0.3;

fn synonym(word: &str) -> Option<&'static str> {
    SYNONYMS
        .binary_search_by(|(k, _)| k.cmp(&word))
        .ok()
        .map(|i| SYNONYMS[i].1)
}

fn match_case(template: &str, replacement: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        chars
            .next()
            .map(|c| c.to_uppercase().chain(chars).collect())
            .unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        // Leave acronyms like "HP" alone.
        Some(c) if !chars.clone().next().is_some_and(char::is_uppercase) => {
            c.to_lowercase().chain(chars).collect()
        }
        _ => s.to_string(),
    }
}

/// Deterministic stand-in for an LLM paraphraser.
///
/// Reads the original sentence from the prompt's `Sentence:` line and applies
/// synonym swaps, an optional sentence opener, or a closing intensifier when
/// nothing else changed. With probability [`MOCK_DRIFT_PROBABILITY`] the
/// second half of a longer sentence is replaced by a generic clause, giving
/// the similarity filter something to reject. The output is a pure function
/// of `(prompt, seed)`.
#[derive(Debug, Clone)]
pub struct MockParaphraser {
    seed: u64,
}

impl MockParaphraser {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn paraphrase(&self, sentence: &str, rng: &mut ChaCha8Rng) -> String {
        let n_tokens = tokenize(sentence).len();
        let mut budget = (n_tokens / 4).max(1);
        let mut changed = false;

        let mut source: Vec<&str> = sentence.split_whitespace().collect();
        let mut drift = None;
        if source.len() >= 6 && rng.gen_bool(MOCK_DRIFT_PROBABILITY) {
            source.truncate(source.len().div_ceil(2));
            drift = Some(*DRIFT_CLAUSES.choose(rng).expect("non-empty"));
        }

        let mut words: Vec<String> = Vec::new();
        for word in source {
            let start = word.find(char::is_alphanumeric);
            let end = word.rfind(char::is_alphanumeric).map(|i| i + word[i..].chars().next().unwrap().len_utf8());
            let (Some(start), Some(end)) = (start, end) else {
                words.push(word.to_string());
                continue;
            };
            let core = &word[start..end];
            match synonym(&core.to_lowercase()) {
                Some(replacement) if budget > 0 && rng.gen_bool(0.6) => {
                    budget -= 1;
                    changed = true;
                    words.push(format!("{}{}{}", &word[..start], match_case(core, replacement), &word[end..]));
                }
                _ => words.push(word.to_string()),
            }
        }
        let mut text = words.join(" ");
        if let Some(clause) = drift {
            let kept = text.trim_end_matches([',', ';', '.', '!', '?']);
            text = format!("{kept} {clause}.");
            changed = true;
        }

        if n_tokens >= 10 && rng.gen_bool(0.5) {
            let opener = OPENERS.choose(rng).expect("non-empty");
            text = format!("{opener} {}", lowercase_first(&text));
            changed = true;
        }
        if !changed {
            let closer = CLOSERS.choose(rng).expect("non-empty");
            let trimmed = text.trim_end_matches(['.', '!', '?']);
            let punct = &text[trimmed.len()..];
            let punct = if punct.is_empty() { "." } else { punct };
            text = format!("{trimmed}, {closer}{punct}");
        }
        text
    }
}

impl GenerationBackend for MockParaphraser {
    fn id(&self) -> &str {
        "mock-paraphraser"
    }

    fn generate(&self, prompt: &str, _config: &GenerationConfig, seed: u64) -> Result<String, BackendError> {
        let mut rng = call_rng(self.seed, seed, prompt);
        Ok(self.paraphrase(original_sentence(prompt), &mut rng))
    }
}

const SUBJECTS: &[&str] = &[
    "The quarterly tax bulletin",
    "A migrating flock of geese",
    "The municipal water board",
    "An elderly lighthouse keeper",
    "The satellite uplink",
    "A committee of geologists",
];
const VERBS: &[&str] = &["postponed", "photographed", "recalibrated", "catalogued", "surveyed", "inspected"];
const OBJECTS: &[&str] = &[
    "the tidal charts",
    "seventeen granite boulders",
    "the archived census ledgers",
    "a rusty weather vane",
    "the orbital telemetry",
    "several glacial moraines",
];
const TAILS: &[&str] = &[
    "before dawn",
    "during the solstice",
    "near the harbor",
    "without any warning",
    "for the third consecutive year",
    "along the northern ridge",
];

/// Deterministic backend that ignores the prompt's meaning and emits an
/// unrelated sentence. Used to check that filtering rejects off-topic output.
#[derive(Debug, Clone)]
pub struct CorruptingMock {
    seed: u64,
}

impl CorruptingMock {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl GenerationBackend for CorruptingMock {
    fn id(&self) -> &str {
        "corrupting-mock"
    }

    fn generate(&self, prompt: &str, _config: &GenerationConfig, seed: u64) -> Result<String, BackendError> {
        let mut rng = call_rng(self.seed, seed, prompt);
        let pick = |rng: &mut ChaCha8Rng, list: &[&'static str]| *list.choose(rng).expect("non-empty");
        Ok(format!(
            "{} {} {} {}.",
            pick(&mut rng, SUBJECTS),
            pick(&mut rng, VERBS),
            pick(&mut rng, OBJECTS),
            pick(&mut rng, TAILS)
        ))
    }
}

/// Request body for a chat-completions endpoint.
pub fn chat_request_body(prompt: &str, config: &GenerationConfig) -> Value {
    json!({
        "model": config.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
    })
}

/// Extracts `choices[0].message.content` from a chat-completions response.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::permanent(format!("invalid response JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::permanent("response has no choices[0].message.content"))
}

/// Chat-completions client over HTTP(S). Rate limits, server errors and
/// network failures are reported as transient.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::permanent(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, BackendError> {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }
}

impl GenerationBackend for HttpChatBackend {
    fn id(&self) -> &str {
        "http-chat"
    }

    fn generate(&self, prompt: &str, config: &GenerationConfig, _seed: u64) -> Result<String, BackendError> {
        let body = chat_request_body(prompt, config);
        let text = crate::http::send_json(&self.client, &self.endpoint, self.api_key.as_deref(), &body, config.timeout)?;
        parse_chat_response(&text)
    }
}
