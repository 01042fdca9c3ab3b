use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Value};

use super::{EmbeddingProvider, EmbeddingVector, FilterError};
use crate::augment::API_KEY_ENV;
use crate::hashing::{bucket, tokenize};

/// Deterministic mock embedder: counts of lowercased alphanumeric tokens
/// hashed into `dim` buckets (256 by default). Paraphrases that keep most of
/// the wording score high; unrelated text scores near zero.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub const DEFAULT_DIM: usize = 256;
    const HASH_SEED: u64 = 0;

    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashedBagOfWords {
    fn id(&self) -> &str {
        "hashed-bow"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, FilterError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(FilterError::Provider(format!("no tokens in {text:?}")));
        }
        let mut values = vec![0.0; self.dim];
        for token in &tokens {
            values[bucket(Self::HASH_SEED, token.as_bytes(), self.dim)] += 1.0;
        }
        EmbeddingVector::new(values)
    }
}

pub fn embeddings_request_body(model: &str, texts: &[&str]) -> Value {
    json!({ "model": model, "input": texts })
}

/// Parses `{"data": [{"embedding": [...], "index": i}, ...]}`, ordering by
/// `index` when present.
pub fn parse_embeddings_response(body: &str, expected: usize) -> Result<Vec<EmbeddingVector>, FilterError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| FilterError::Provider(format!("invalid response JSON: {e}")))?;
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| FilterError::Provider("response has no data array".into()))?;
    if data.len() != expected {
        return Err(FilterError::Provider(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut indexed = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| FilterError::Provider(format!("item {pos} has no embedding")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| FilterError::Provider("non-numeric embedding entry".into())))
            .collect::<Result<Vec<_>, _>>()?;
        indexed.push((index, EmbeddingVector::new(values)?));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, v)| v).collect())
}

/// Embeddings client for an HTTP endpoint accepting `{model, input: [texts]}`.
#[derive(Debug)]
pub struct HttpEmbeddingProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    client: reqwest::blocking::Client,
    dim: OnceLock<usize>,
}

impl HttpEmbeddingProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, FilterError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| FilterError::Provider(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout,
            client,
            dim: OnceLock::new(),
        })
    }

    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Result<Self, FilterError> {
        Self::new(
            endpoint,
            model,
            std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout,
        )
    }

    fn check_dim(&self, vectors: &[EmbeddingVector]) -> Result<(), FilterError> {
        for v in vectors {
            let dim = *self.dim.get_or_init(|| v.dim());
            if v.dim() != dim {
                return Err(FilterError::DimensionMismatch(dim, v.dim()));
            }
        }
        Ok(())
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> &str {
        "http-embeddings"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, FilterError> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, FilterError> {
        let body = embeddings_request_body(&self.model, texts);
        let response = crate::http::send_json(
            &self.client,
            &self.endpoint,
            self.api_key.as_deref(),
            &body,
            self.timeout,
        )
        .map_err(|e| FilterError::Provider(e.message))?;
        let vectors = parse_embeddings_response(&response, texts.len())?;
        self.check_dim(&vectors)?;
        Ok(vectors)
    }
}
