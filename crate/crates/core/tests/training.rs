use acsa_forge_core::dataset::{CategorySentimentPair, Sentence, Sentiment};
use acsa_forge_core::trainer::{self, fit_classifier, Example, FeatureVector, TrainConfig};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 200 samples in 3 well-separated clusters around the unit axes of R^6.
fn separable_set(seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..200)
        .map(|i| {
            let label = i % 3;
            let mut x: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect();
            x[label] += 1.0;
            x[label + 3] += 1.0;
            Example {
                features: FeatureVector::from_dense(&x),
                label,
            }
        })
        .collect()
}

#[test]
fn separable_set_reaches_full_accuracy() {
    let data = separable_set(1);
    let config = TrainConfig {
        alpha: 0.5,
        epochs: 100,
        seed: 3,
        ..Default::default()
    };
    let (_, report) = fit_classifier(&data, 3, 6, &config).unwrap();
    assert_eq!(report.final_train_accuracy, 1.0);
    assert_eq!(report.epochs.len(), 100);
    assert!(report.epochs.iter().all(|e| e.mean_loss.is_finite() && e.mean_loss >= 0.0));

    // Plain CE separates it too.
    let plain = TrainConfig { alpha: 0.0, ..config };
    assert_eq!(fit_classifier(&data, 3, 6, &plain).unwrap().1.final_train_accuracy, 1.0);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let data = separable_set(2);
    let config = TrainConfig {
        epochs: 20,
        seed: 99,
        ..Default::default()
    };
    let (a, ra) = fit_classifier(&data, 3, 6, &config).unwrap();
    let (b, rb) = fit_classifier(&data, 3, 6, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let other = TrainConfig { seed: 100, ..config };
    assert_ne!(fit_classifier(&data, 3, 6, &other).unwrap().0, a);
}

/// Plain softmax cross-entropy mini-batch descent written out from scratch,
/// consuming the random stream in the documented order.
fn reference_plain_ce(data: &[Example], dim: usize, config: &TrainConfig) -> Vec<f64> {
    let k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Uniform::new_inclusive(-0.01, 0.01);
    let mut w: Vec<f64> = (0..k * dim).map(|_| init.sample(&mut rng)).collect();
    let mut b: Vec<f64> = (0..k).map(|_| init.sample(&mut rng)).collect();
    let dense: Vec<Vec<f64>> = data.iter().map(|e| e.features.to_dense()).collect();
    let probs = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..dim).map(|j| w[c * dim + j] * x[j]).sum::<f64>() + b[c])
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut gw = vec![0.0; k * dim];
            let mut gb = vec![0.0; k];
            for &i in chunk {
                let p = probs(&w, &b, &dense[i]);
                for c in 0..k {
                    let g = p[c] - if c == data[i].label { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for j in 0..dim {
                        gw[c * dim + j] += g * dense[i][j];
                    }
                }
            }
            let n = chunk.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= config.learning_rate * g / n;
            }
            for (bi, g) in b.iter_mut().zip(&gb) {
                *bi -= config.learning_rate * g / n;
            }
        }
        let loss: f64 = data
            .iter()
            .zip(&dense)
            .map(|(e, x)| -probs(&w, &b, x)[e.label].ln())
            .sum::<f64>()
            / data.len() as f64;
        losses.push(loss);
    }
    losses
}

#[test]
fn alpha_zero_matches_reference_plain_ce() {
    let data = separable_set(4);
    let config = TrainConfig {
        alpha: 0.0,
        epochs: 30,
        seed: 8,
        batch_size: 16,
        ..Default::default()
    };
    let (_, report) = fit_classifier(&data, 3, 6, &config).unwrap();
    let reference = reference_plain_ce(&data, 6, &config);
    for (got, want) in report.epochs.iter().map(|e| e.mean_loss).zip(&reference) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn confidence_weighting_raises_confidence() {
    let data = separable_set(6);
    let base = TrainConfig {
        epochs: 100,
        seed: 1,
        ..Default::default()
    };
    let with = fit_classifier(&data, 3, 6, &TrainConfig { alpha: 1.0, ..base.clone() }).unwrap().1;
    let without = fit_classifier(&data, 3, 6, &TrainConfig { alpha: 0.0, ..base }).unwrap().1;
    assert!(
        with.mean_confidence_correct >= without.mean_confidence_correct,
        "{} < {}",
        with.mean_confidence_correct,
        without.mean_confidence_correct
    );
}

fn pair(c: &str, s: Sentiment) -> CategorySentimentPair {
    CategorySentimentPair::new(c, s).unwrap()
}

#[test]
fn text_model_fits_tiny_corpus() {
    let data = vec![
        Sentence::new("1", "The pizza was delicious", [pair("FOOD#QUALITY", Sentiment::Positive)]).unwrap(),
        Sentence::new("2", "The pasta was bland and cold", [pair("FOOD#QUALITY", Sentiment::Negative)]).unwrap(),
        Sentence::new("3", "Our waiter was rude", [pair("SERVICE#GENERAL", Sentiment::Negative)]).unwrap(),
        Sentence::new("4", "The staff were friendly and attentive", [pair("SERVICE#GENERAL", Sentiment::Positive)]).unwrap(),
        Sentence::new(
            "5",
            "Delicious food but rude staff",
            [pair("FOOD#QUALITY", Sentiment::Positive), pair("SERVICE#GENERAL", Sentiment::Negative)],
        )
        .unwrap(),
        Sentence::new("6", "We arrived at seven", []).unwrap(),
    ];
    let config = TrainConfig {
        epochs: 200,
        learning_rate: 0.5,
        feature_dim: 256,
        ..Default::default()
    };
    let (params, report) = trainer::train(&data, &config).unwrap();
    assert_eq!(params.categories, ["FOOD#QUALITY", "SERVICE#GENERAL"]);
    assert_eq!(report.final_train_accuracy, 1.0);
    for s in data.iter().filter(|s| s.is_labeled()) {
        let predicted = trainer::predict_acsa(&params, &s.text, &params.categories, 0.5).unwrap();
        assert_eq!(predicted, s.pairs, "{}", s.text);
    }
}
