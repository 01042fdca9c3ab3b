//! Desk-scale ACSA model trained with the confidence-weighted objective.
//!
//! The model has two linear heads over hashed n-gram features:
//!
//! - a sentiment head (3-way softmax) over text features concatenated with a
//!   one-hot category block, trained with the confidence-weighted loss from
//!   [`objective`];
//! - a category detection head (one sigmoid per category) over text features,
//!   trained with plain binary cross-entropy.
//!
//! Training is plain mini-batch gradient descent and is fully determined by
//! the config seed. Random numbers are drawn from one ChaCha8 stream in this
//! order: sentiment head weights (row-major) then biases, one shuffle of the
//! sentiment examples per epoch, then the detection head weights and biases,
//! then one shuffle of the detection examples per epoch. All initial
//! parameters are uniform in `[-0.01, 0.01]`.

pub mod features;
pub mod objective;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategorySentimentPair, PairSet, Sentence, Sentiment};
pub use features::{FeatureVector, Featurizer};
pub use objective::{
    argmax, batch_loss, ce_loss, confidence_value, forward_sample, gradient, loss_and_gradient, softmax,
    softmax_forward, weighted_loss, Example, HeadGradient, MultiLabelExample, SigmoidHeads, SoftmaxHead,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty text")]
    EmptyText,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("category {0:?} is not in the model vocabulary")]
    UnknownCategory(String),
    #[error("category vocabulary does not match the model")]
    VocabularyMismatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}: {value}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Config and presets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Rest15,
    Rest16,
    Lap15,
    Lap16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Acsc,
    Acsa,
}

/// Tuned confidence weights per benchmark and task.
pub fn alpha_preset(benchmark: Benchmark, task: Task) -> f64 {
    match (task, benchmark) {
        (Task::Acsc, Benchmark::Rest15) => 0.4673,
        (Task::Acsc, Benchmark::Rest16) => 0.3045,
        (Task::Acsc, Benchmark::Lap15) => 0.3045,
        (Task::Acsc, Benchmark::Lap16) => 0.6123,
        (Task::Acsa, Benchmark::Rest15) => 0.1713,
        (Task::Acsa, Benchmark::Rest16) => 0.5903,
        (Task::Acsa, Benchmark::Lap15) => 0.2526,
        (Task::Acsa, Benchmark::Lap16) => 0.5378,
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rest15" => Ok(Self::Rest15),
            "rest16" => Ok(Self::Rest16),
            "lap15" => Ok(Self::Lap15),
            "lap16" => Ok(Self::Lap16),
            _ => Err(format!("unknown benchmark {s:?}")),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "acsc" => Ok(Self::Acsc),
            "acsa" => Ok(Self::Acsa),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Confidence weight. Zero turns the objective into plain cross-entropy.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub acd_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: alpha_preset(Benchmark::Rest15, Task::Acsa),
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            feature_dim: 4096,
            hash_seed: 0,
            acd_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        validate_threshold(self.acd_threshold)
    }
}

fn validate_threshold(threshold: f64) -> Result<(), TrainError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!("acd_threshold {threshold} outside (0, 1)")))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean confidence-weighted loss over the whole training set after the epoch.
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Mean max-probability over correctly classified samples (0 if none).
    pub mean_confidence_correct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: f64,
    pub mean_confidence_correct: f64,
    /// Mean detection-head BCE after each epoch (empty when not trained).
    pub acd_epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        for stats in &self.epochs {
            serde_json::to_writer(&mut out, stats).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loss, accuracy and mean correct-confidence of `head` over `examples`.
pub fn evaluate_head(head: &SoftmaxHead, examples: &[Example], alpha: f64) -> Result<(f64, f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut confidence = 0.0;
    for example in examples {
        let fwd = forward_sample(head, example, alpha)?;
        loss += fwd.loss;
        if argmax(&fwd.probs) == example.label {
            correct += 1;
            confidence += fwd.confidence;
        }
    }
    let n = examples.len() as f64;
    let mean_conf = if correct > 0 { confidence / correct as f64 } else { 0.0 };
    Ok((loss / n, correct as f64 / n, mean_conf))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn uniform_init(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE);
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn init_softmax(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize) -> SoftmaxHead {
    let weights = uniform_init(rng, n_classes * dim);
    let bias = uniform_init(rng, n_classes);
    SoftmaxHead {
        n_classes,
        dim,
        weights,
        bias,
    }
}

fn fit_softmax_with(
    rng: &mut ChaCha8Rng,
    examples: &[Example],
    n_classes: usize,
    dim: usize,
    config: &TrainConfig,
) -> Result<(SoftmaxHead, Vec<EpochStats>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for example in examples {
        if example.label >= n_classes {
            return Err(TrainError::LabelOutOfRange {
                label: example.label,
                n_classes,
            });
        }
        if example.features.dim() != dim {
            return Err(TrainError::Shape(format!(
                "example has dim {}, expected {dim}",
                example.features.dim()
            )));
        }
    }
    let mut head = init_softmax(rng, n_classes, dim);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch: Vec<Example> = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grad) = loss_and_gradient(&batch, &head, config.alpha)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            head.descend(&grad, config.learning_rate);
            if !head.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "parameter",
                    epoch,
                    batch: b,
                    value: f64::NAN,
                });
            }
        }
        let (mean_loss, train_accuracy, mean_confidence_correct) = evaluate_head(&head, examples, config.alpha)?;
        log::debug!("epoch {epoch}: loss {mean_loss:.6} acc {train_accuracy:.4}");
        history.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy,
            mean_confidence_correct,
        });
    }
    Ok((head, history))
}

fn report_from(history: Vec<EpochStats>, head: &SoftmaxHead, examples: &[Example], alpha: f64) -> Result<TrainReport, TrainError> {
    let (final_train_accuracy, mean_confidence_correct) = match history.last() {
        Some(last) => (last.train_accuracy, last.mean_confidence_correct),
        None => {
            let (_, acc, conf) = evaluate_head(head, examples, alpha)?;
            (acc, conf)
        }
    };
    Ok(TrainReport {
        epochs: history,
        final_train_accuracy,
        mean_confidence_correct,
        acd_epoch_losses: Vec::new(),
    })
}

/// Trains a standalone softmax classifier on pre-featurized examples with the
/// confidence-weighted objective.
pub fn fit_classifier(
    examples: &[Example],
    n_classes: usize,
    dim: usize,
    config: &TrainConfig,
) -> Result<(SoftmaxHead, TrainReport), TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (head, history) = fit_softmax_with(&mut rng, examples, n_classes, dim, config)?;
    let report = report_from(history, &head, examples, config.alpha)?;
    Ok((head, report))
}

fn fit_detection(
    rng: &mut ChaCha8Rng,
    examples: &[MultiLabelExample],
    n_labels: usize,
    dim: usize,
    config: &TrainConfig,
) -> Result<(SigmoidHeads, Vec<f64>), TrainError> {
    let weights = uniform_init(rng, n_labels * dim);
    let bias = uniform_init(rng, n_labels);
    let mut heads = SigmoidHeads {
        n_labels,
        dim,
        weights,
        bias,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut batch: Vec<MultiLabelExample> = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grad) = heads.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "detection loss",
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            heads.descend(&grad, config.learning_rate);
        }
        let (loss, _) = heads.loss_and_gradient(examples)?;
        losses.push(loss);
    }
    Ok((heads, losses))
}

/// Trained parameters plus everything needed to featurize new text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub format_version: u32,
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub categories: Vec<String>,
    /// Sentiment head over `feature_dim + categories.len()` inputs.
    pub acsc: SoftmaxHead,
    /// Category detection head over `feature_dim` inputs.
    pub acd: SigmoidHeads,
}

impl ModelParams {
    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(self.feature_dim, self.hash_seed, self.categories.clone())
    }

    pub fn check(&self) -> Result<(), TrainError> {
        self.acsc.check()?;
        self.acd.check()?;
        let k = self.categories.len();
        if self.acsc.n_classes != Sentiment::ALL.len()
            || self.acsc.dim != self.feature_dim + k
            || self.acd.n_labels != k
            || self.acd.dim != self.feature_dim
        {
            return Err(TrainError::Shape("checkpoint shapes disagree with its vocabulary".into()));
        }
        if !(self.acsc.is_finite() && self.acd.is_finite()) {
            return Err(TrainError::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let params: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if params.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::CheckpointVersion(params.format_version));
        }
        params.check()?;
        Ok(params)
    }
}

/// Sorted distinct categories of the labeled sentences.
pub fn category_vocabulary(sentences: &[Sentence]) -> Vec<String> {
    let set: BTreeSet<&str> = sentences
        .iter()
        .flat_map(|s| s.pairs.iter().map(|p| p.category.as_str()))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

/// Trains both heads with the vocabulary taken from `train_set`.
pub fn train(train_set: &[Sentence], config: &TrainConfig) -> Result<(ModelParams, TrainReport), TrainError> {
    let vocabulary = category_vocabulary(train_set);
    train_with_vocabulary(train_set, &vocabulary, config)
}

/// Trains both heads over a fixed category vocabulary. Unlabeled sentences
/// are skipped; a pair whose category is not in `vocabulary` is an error.
pub fn train_with_vocabulary(
    train_set: &[Sentence],
    vocabulary: &[String],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    config.validate()?;
    let labeled: Vec<&Sentence> = train_set.iter().filter(|s| s.is_labeled()).collect();
    if labeled.is_empty() || vocabulary.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let featurizer = Featurizer::new(config.feature_dim, config.hash_seed, vocabulary.to_vec());

    let mut acsc_examples = Vec::new();
    let mut acd_examples = Vec::with_capacity(labeled.len());
    for sentence in &labeled {
        let mut targets = vec![false; vocabulary.len()];
        for pair in &sentence.pairs {
            let k = featurizer
                .category_index(&pair.category)
                .ok_or_else(|| TrainError::UnknownCategory(pair.category.clone()))?;
            targets[k] = true;
            acsc_examples.push(Example {
                features: featurizer.featurize(&sentence.text, Some(&pair.category))?,
                label: pair.sentiment.index(),
            });
        }
        acd_examples.push(MultiLabelExample {
            features: featurizer.featurize(&sentence.text, None)?,
            targets,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (acsc, history) = fit_softmax_with(
        &mut rng,
        &acsc_examples,
        Sentiment::ALL.len(),
        featurizer.pair_dim(),
        config,
    )?;
    let (acd, acd_losses) = fit_detection(&mut rng, &acd_examples, vocabulary.len(), config.feature_dim, config)?;
    let mut report = report_from(history, &acsc, &acsc_examples, config.alpha)?;
    report.acd_epoch_losses = acd_losses;

    let params = ModelParams {
        format_version: CHECKPOINT_FORMAT_VERSION,
        feature_dim: config.feature_dim,
        hash_seed: config.hash_seed,
        categories: vocabulary.to_vec(),
        acsc,
        acd,
    };
    Ok((params, report))
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Predicted sentiment for a known category, or `None` when the category is
/// outside the model vocabulary.
pub fn predict_sentiment(params: &ModelParams, text: &str, category: &str) -> Result<Option<Sentiment>, TrainError> {
    let featurizer = params.featurizer();
    if featurizer.category_index(category).is_none() {
        return Ok(None);
    }
    let probs = softmax_forward(&params.acsc, &featurizer.featurize(text, Some(category))?)?;
    Ok(Sentiment::from_index(argmax(&probs)))
}

/// Joint prediction: every category whose detection score reaches
/// `acd_threshold`, each with its argmax sentiment.
pub fn predict_acsa(
    params: &ModelParams,
    text: &str,
    category_vocabulary: &[String],
    acd_threshold: f64,
) -> Result<PairSet, TrainError> {
    if category_vocabulary != params.categories.as_slice() {
        return Err(TrainError::VocabularyMismatch);
    }
    validate_threshold(acd_threshold)?;
    let featurizer = params.featurizer();
    let scores = params.acd.scores(&featurizer.featurize(text, None)?)?;
    let mut out = PairSet::new();
    for (category, score) in category_vocabulary.iter().zip(scores) {
        if score >= acd_threshold {
            let probs = softmax_forward(&params.acsc, &featurizer.featurize(text, Some(category))?)?;
            let sentiment = Sentiment::from_index(argmax(&probs)).expect("three classes");
            out.insert(CategorySentimentPair {
                category: category.clone(),
                sentiment,
            });
        }
    }
    Ok(out)
}
