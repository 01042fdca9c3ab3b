//! Pair-level scoring and error analysis.
//!
//! Scores are micro-averaged over deduplicated (category, sentiment) pairs
//! with exact, case-sensitive matching. A zero denominator yields 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{PairSet, Sentence, Sentiment};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction for unknown sentence {0:?}")]
    UnknownSentence(String),
    #[error("prediction for ({0:?}, {1:?}) which is not a gold category of that sentence")]
    NotAGoldCategory(String, String),
}

pub type Predictions = BTreeMap<String, PairSet>;
pub type Golds = BTreeMap<String, PairSet>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_gold: usize,
    pub n_correct: usize,
}

impl EvalReport {
    pub fn from_counts(n_correct: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            n_pred,
            n_gold,
            n_correct,
        }
    }
}

/// Gold pair sets keyed by sentence id.
pub fn golds_from(sentences: &[Sentence]) -> Golds {
    sentences.iter().map(|s| (s.id.clone(), s.pairs.clone())).collect()
}

fn check_ids(predictions: &Predictions, golds: &Golds) -> Result<(), EvalError> {
    match predictions.keys().find(|id| !golds.contains_key(*id)) {
        Some(id) => Err(EvalError::UnknownSentence(id.clone())),
        None => Ok(()),
    }
}

/// Micro P/R/F1 over (sentence, category, sentiment) triples. Gold sentences
/// without a prediction count as predicting nothing.
pub fn micro_prf(predictions: &Predictions, golds: &Golds) -> Result<EvalReport, EvalError> {
    check_ids(predictions, golds)?;
    let n_gold = golds.values().map(BTreeSet::len).sum();
    let mut n_pred = 0;
    let mut n_correct = 0;
    for (id, predicted) in predictions {
        n_pred += predicted.len();
        n_correct += predicted.intersection(&golds[id]).count();
    }
    Ok(EvalReport::from_counts(n_correct, n_pred, n_gold))
}

/// Sentiment classification given gold categories. Keys are
/// `(sentence_id, category)`; each gold key counts once and a prediction is
/// correct when the gold pairs contain `(category, predicted sentiment)`.
/// With every key answered, precision = recall = accuracy.
pub fn acsc_eval(
    predictions: &BTreeMap<(String, String), Sentiment>,
    golds: &Golds,
) -> Result<EvalReport, EvalError> {
    let n_gold = golds
        .values()
        .map(|pairs| pairs.iter().map(|p| p.category.as_str()).collect::<BTreeSet<_>>().len())
        .sum();
    let mut n_correct = 0;
    for ((id, category), sentiment) in predictions {
        let gold = golds.get(id).ok_or_else(|| EvalError::UnknownSentence(id.clone()))?;
        let mut gold_sentiments = gold.iter().filter(|p| &p.category == category).map(|p| p.sentiment).peekable();
        if gold_sentiments.peek().is_none() {
            return Err(EvalError::NotAGoldCategory(id.clone(), category.clone()));
        }
        if gold_sentiments.any(|s| s == *sentiment) {
            n_correct += 1;
        }
    }
    Ok(EvalReport::from_counts(n_correct, predictions.len(), n_gold))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Wrong predictions whose category is not among the sentence's gold categories.
    pub n_category_errors: usize,
    /// Wrong predictions whose category is gold but whose sentiment is not.
    pub n_sentiment_errors: usize,
    pub per_category_errors: BTreeMap<String, usize>,
}

/// Counts per sentence, used for the per-sentence consistency check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SentenceErrors {
    pub true_positives: usize,
    pub category_errors: usize,
    pub sentiment_errors: usize,
}

/// Splits one sentence's predicted pairs into hits, sentiment errors and
/// category errors, calling `attribute` with the category of each error.
fn classify_sentence(predicted: &PairSet, gold: &PairSet, mut attribute: impl FnMut(&str)) -> SentenceErrors {
    let gold_categories: BTreeSet<&str> = gold.iter().map(|p| p.category.as_str()).collect();
    let mut counts = SentenceErrors::default();
    for pair in predicted {
        if gold.contains(pair) {
            counts.true_positives += 1;
        } else if gold_categories.contains(pair.category.as_str()) {
            counts.sentiment_errors += 1;
            attribute(&pair.category);
        } else {
            counts.category_errors += 1;
            attribute(&pair.category);
        }
    }
    counts
}

pub fn sentence_errors(predicted: &PairSet, gold: &PairSet) -> SentenceErrors {
    classify_sentence(predicted, gold, |_| {})
}

pub fn error_breakdown(predictions: &Predictions, golds: &Golds) -> Result<ErrorBreakdown, EvalError> {
    check_ids(predictions, golds)?;
    let mut out = ErrorBreakdown::default();
    for (id, predicted) in predictions {
        let counts = classify_sentence(predicted, &golds[id], |category| {
            *out.per_category_errors.entry(category.to_string()).or_insert(0) += 1;
        });
        out.n_category_errors += counts.category_errors;
        out.n_sentiment_errors += counts.sentiment_errors;
    }
    Ok(out)
}
