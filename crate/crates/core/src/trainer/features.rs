use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::hashing::{bucket, tokenize};

/// Sparse real vector with sorted, unique indices below `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    /// Builds a vector from possibly repeated `(index, value)` pairs, summing
    /// repeats and dropping exact zeros.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self, TrainError> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            if i >= dim {
                return Err(TrainError::Shape(format!("index {i} out of range for dim {dim}")));
            }
            *acc.entry(i).or_insert(0.0) += v;
        }
        Ok(Self {
            dim,
            entries: acc.into_iter().filter(|(_, v)| *v != 0.0).collect(),
        })
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        debug_assert_eq!(dense.len(), self.dim);
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }
}

/// Hashed unigram + bigram counts over lowercased tokens, with an optional
/// one-hot category block appended after the `feature_dim` text buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Featurizer {
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub categories: Vec<String>,
}

impl Featurizer {
    pub fn new(feature_dim: usize, hash_seed: u64, categories: Vec<String>) -> Self {
        Self {
            feature_dim,
            hash_seed,
            categories,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Dimension of [`Featurizer::featurize`] output with a category.
    pub fn pair_dim(&self) -> usize {
        self.feature_dim + self.categories.len()
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }

    fn text_buckets(&self, text: &str) -> Result<Vec<usize>, TrainError> {
        if text.trim().is_empty() {
            return Err(TrainError::EmptyText);
        }
        let tokens = tokenize(text);
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for token in &tokens {
            let key = format!("u\u{0}{token}");
            out.push(bucket(self.hash_seed, key.as_bytes(), self.feature_dim));
        }
        for pair in tokens.windows(2) {
            let key = format!("b\u{0}{}\u{0}{}", pair[0], pair[1]);
            out.push(bucket(self.hash_seed, key.as_bytes(), self.feature_dim));
        }
        Ok(out)
    }

    /// Featurizes `text`, appending the one-hot block for `category` when
    /// given. Unknown categories are an error.
    pub fn featurize(&self, text: &str, category: Option<&str>) -> Result<FeatureVector, TrainError> {
        let buckets = self.text_buckets(text)?;
        let counts = buckets.into_iter().map(|b| (b, 1.0));
        match category {
            None => FeatureVector::from_pairs(self.feature_dim, counts),
            Some(category) => {
                let k = self
                    .category_index(category)
                    .ok_or_else(|| TrainError::UnknownCategory(category.to_string()))?;
                FeatureVector::from_pairs(self.pair_dim(), counts.chain([(self.feature_dim + k, 1.0)]))
            }
        }
    }
}
