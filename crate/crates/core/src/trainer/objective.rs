//! Confidence-weighted cross-entropy for the sentiment head.
//!
//! For a sample with gold class `y` and predicted distribution `p`:
//!
//! ```text
//! ce = -ln p[y]
//! v  = max(p)  if argmax(p) == y  else 0      (ties -> lowest index)
//! L  = ce * (1 + alpha * v)
//! ```
//!
//! and the batch objective is the mean of `L`. For differentiation `v` is
//! held fixed at its forward-pass value, so each sample contributes
//! `(1 + alpha * v)` times the ordinary softmax cross-entropy gradient.

use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::TrainError;

/// A featurized sample with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    pub label: usize,
}

/// Linear softmax classifier: `logits = W x + b`, `W` row-major
/// `n_classes x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Same shape as the head it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.n_classes == 0 || self.weights.len() != self.n_classes * self.dim || self.bias.len() != self.n_classes {
            return Err(TrainError::Shape(format!(
                "head {}x{} has {} weights and {} biases",
                self.n_classes,
                self.dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>, TrainError> {
        if x.dim() != self.dim {
            return Err(TrainError::Shape(format!("features have dim {}, head expects {}", x.dim(), self.dim)));
        }
        Ok((0..self.n_classes).map(|c| x.dot(self.row(c)) + self.bias[c]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// `self -= step * grad`.
    pub fn descend(&mut self, grad: &HeadGradient, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= step * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= step * g;
        }
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_forward(head: &SoftmaxHead, x: &FeatureVector) -> Result<Vec<f64>, TrainError> {
    head.check()?;
    Ok(softmax(&head.logits(x)?))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_label(p: &[f64], y: usize) -> Result<(), TrainError> {
    if y >= p.len() {
        return Err(TrainError::LabelOutOfRange { label: y, n_classes: p.len() });
    }
    Ok(())
}

/// `-ln p[y]`.
pub fn ce_loss(p: &[f64], y: usize) -> Result<f64, TrainError> {
    check_label(p, y)?;
    Ok(-libm::log(p[y]))
}

/// `max(p)` when the prediction is correct, otherwise 0.
pub fn confidence_value(p: &[f64], y: usize) -> Result<f64, TrainError> {
    check_label(p, y)?;
    let predicted = argmax(p);
    Ok(if predicted == y { p[predicted] } else { 0.0 })
}

/// `ce * (1 + alpha * v)`.
pub fn weighted_loss(ce: f64, v: f64, alpha: f64) -> f64 {
    ce * (1.0 + alpha * v)
}

/// Forward pass for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleForward {
    pub probs: Vec<f64>,
    pub ce: f64,
    pub confidence: f64,
    pub loss: f64,
}

pub fn forward_sample(head: &SoftmaxHead, example: &Example, alpha: f64) -> Result<SampleForward, TrainError> {
    let probs = softmax(&head.logits(&example.features)?);
    let ce = ce_loss(&probs, example.label)?;
    let confidence = confidence_value(&probs, example.label)?;
    Ok(SampleForward {
        loss: weighted_loss(ce, confidence, alpha),
        probs,
        ce,
        confidence,
    })
}

/// Mean confidence-weighted loss over `samples`.
pub fn batch_loss(samples: &[Example], head: &SoftmaxHead, alpha: f64) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    head.check()?;
    let mut total = 0.0;
    for example in samples {
        total += forward_sample(head, example, alpha)?.loss;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and its gradient with each sample's confidence held fixed.
/// Accumulation runs in sample order.
pub fn loss_and_gradient(samples: &[Example], head: &SoftmaxHead, alpha: f64) -> Result<(f64, HeadGradient), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    head.check()?;
    let mut grad = HeadGradient {
        weights: vec![0.0; head.weights.len()],
        bias: vec![0.0; head.n_classes],
    };
    let mut total = 0.0;
    for example in samples {
        let fwd = forward_sample(head, example, alpha)?;
        total += fwd.loss;
        let weight = 1.0 + alpha * fwd.confidence;
        for c in 0..head.n_classes {
            let indicator = if c == example.label { 1.0 } else { 0.0 };
            let g = weight * (fwd.probs[c] - indicator);
            grad.bias[c] += g;
            let row = &mut grad.weights[c * head.dim..(c + 1) * head.dim];
            for &(j, x) in example.features.entries() {
                row[j] += g * x;
            }
        }
    }
    let n = samples.len() as f64;
    grad.weights.iter_mut().chain(grad.bias.iter_mut()).for_each(|g| *g /= n);
    Ok((total / n, grad))
}

pub fn gradient(samples: &[Example], head: &SoftmaxHead, alpha: f64) -> Result<HeadGradient, TrainError> {
    loss_and_gradient(samples, head, alpha).map(|(_, g)| g)
}

// ---------------------------------------------------------------------------
// Category detection head
// ---------------------------------------------------------------------------

/// Independent sigmoid outputs, one per category, trained with plain binary
/// cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidHeads {
    pub n_labels: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelExample {
    pub features: FeatureVector,
    pub targets: Vec<bool>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy computed from the logit.
fn bce_with_logit(z: f64, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs()))
}

impl SigmoidHeads {
    pub fn zeros(n_labels: usize, dim: usize) -> Self {
        Self {
            n_labels,
            dim,
            weights: vec![0.0; n_labels * dim],
            bias: vec![0.0; n_labels],
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.weights.len() != self.n_labels * self.dim || self.bias.len() != self.n_labels {
            return Err(TrainError::Shape(format!(
                "detection head {}x{} has {} weights and {} biases",
                self.n_labels,
                self.dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>, TrainError> {
        if x.dim() != self.dim {
            return Err(TrainError::Shape(format!("features have dim {}, head expects {}", x.dim(), self.dim)));
        }
        Ok((0..self.n_labels)
            .map(|k| x.dot(&self.weights[k * self.dim..(k + 1) * self.dim]) + self.bias[k])
            .collect())
    }

    pub fn scores(&self, x: &FeatureVector) -> Result<Vec<f64>, TrainError> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Mean over samples of the summed per-label BCE, plus its gradient.
    pub fn loss_and_gradient(&self, samples: &[MultiLabelExample]) -> Result<(f64, HeadGradient), TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut grad = HeadGradient {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.n_labels],
        };
        let mut total = 0.0;
        for example in samples {
            if example.targets.len() != self.n_labels {
                return Err(TrainError::Shape(format!(
                    "{} targets for {} labels",
                    example.targets.len(),
                    self.n_labels
                )));
            }
            let logits = self.logits(&example.features)?;
            for (k, (&z, &t)) in logits.iter().zip(&example.targets).enumerate() {
                total += bce_with_logit(z, t);
                let g = sigmoid(z) - if t { 1.0 } else { 0.0 };
                grad.bias[k] += g;
                let row = &mut grad.weights[k * self.dim..(k + 1) * self.dim];
                for &(j, x) in example.features.entries() {
                    row[j] += g * x;
                }
            }
        }
        let n = samples.len() as f64;
        grad.weights.iter_mut().chain(grad.bias.iter_mut()).for_each(|g| *g /= n);
        Ok((total / n, grad))
    }

    pub fn descend(&mut self, grad: &HeadGradient, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= step * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= step * g;
        }
    }
}
