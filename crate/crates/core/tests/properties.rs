use std::collections::HashMap;

use acsa_forge_core::augment::AugmentedSample;
use acsa_forge_core::dataset::{
    compute_stats, parse_semeval_xml, read_jsonl_from, write_jsonl_to, CategorySentimentPair, PairSet, Sentence,
    Sentiment,
};
use acsa_forge_core::filter::{apply_threshold, cosine_similarity, score_samples, EmbeddingVector, HashedBagOfWords};
use acsa_forge_core::trainer::objective::{argmax, ce_loss, confidence_value, softmax, weighted_loss};
use acsa_forge_core::trainer::Featurizer;
use proptest::collection::vec;
use proptest::prelude::*;

const CATEGORIES: [&str; 5] = ["FOOD#QUALITY", "SERVICE#GENERAL", "AMBIENCE#GENERAL", "PRICE#GENERAL", "LAPTOP#DESIGN"];
const WORDS: [&str; 12] = [
    "pizza", "staff", "great", "slow", "cheap", "loud", "we", "the", "was", "&", "<b>", "\"ok\"",
];

fn sentiment() -> impl Strategy<Value = Sentiment> {
    prop::sample::select(Sentiment::ALL.to_vec())
}

fn pair_set() -> impl Strategy<Value = PairSet> {
    vec((prop::sample::select(CATEGORIES.to_vec()), sentiment()), 0..4)
        .prop_map(|items| items.into_iter().map(|(c, s)| CategorySentimentPair::new(c, s).unwrap()).collect())
}

fn text() -> impl Strategy<Value = String> {
    vec(prop::sample::select(WORDS.to_vec()), 1..10).prop_map(|w| w.join(" "))
}

fn dataset() -> impl Strategy<Value = Vec<Sentence>> {
    vec((text(), pair_set()), 0..12).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (t, p))| Sentence::new(&format!("s{i}"), &t, p).unwrap())
            .collect()
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn to_semeval_xml(sentences: &[Sentence]) -> String {
    let mut xml = String::from("<?xml version=\"1.0\"?>\n<Reviews><Review rid=\"r\"><sentences>\n");
    for s in sentences {
        xml.push_str(&format!("<sentence id=\"{}\"><text>{}</text>", escape(&s.id), escape(&s.text)));
        if s.is_labeled() {
            xml.push_str("<Opinions>");
            for p in &s.pairs {
                xml.push_str(&format!(
                    "<Opinion target=\"NULL\" category=\"{}\" polarity=\"{}\" from=\"0\" to=\"0\"/>",
                    p.category,
                    p.sentiment.as_str()
                ));
            }
            xml.push_str("</Opinions>");
        }
        xml.push_str("</sentence>\n");
    }
    xml.push_str("</sentences></Review></Reviews>\n");
    xml
}

fn unit_vector() -> impl Strategy<Value = Vec<f64>> {
    (1usize..12).prop_flat_map(|d| vec(-10.0f64..10.0, d)).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    vec(-20.0f64..20.0, 3).prop_map(|logits| softmax(&logits))
}

proptest! {
    #[test]
    fn pair_counts_sum(data in dataset()) {
        let stats = compute_stats(&data);
        let total: usize = data.iter().map(|s| s.pairs.len()).sum();
        prop_assert_eq!(stats.n_positive + stats.n_negative + stats.n_neutral, total);
        prop_assert_eq!(stats.n_pairs(), total);
        prop_assert_eq!(stats.n_sentences, data.len());
        prop_assert_eq!(stats.n_labeled_sentences, data.iter().filter(|s| s.is_labeled()).count());
    }

    #[test]
    fn xml_to_jsonl_round_trip(data in dataset()) {
        let parsed = parse_semeval_xml(to_semeval_xml(&data).as_bytes()).unwrap();
        prop_assert_eq!(&parsed, &data);
        let mut buf = Vec::new();
        write_jsonl_to(&parsed, &mut buf).unwrap();
        let back = read_jsonl_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn cosine_properties(a in unit_vector(), scale in 0.01f64..100.0, seed in any::<u64>()) {
        let va = EmbeddingVector::new(a.clone()).unwrap();
        prop_assert!((cosine_similarity(&va, &va).unwrap() - 1.0).abs() < 1e-9);
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * scale).collect()).unwrap();
        prop_assert!((cosine_similarity(&va, &scaled).unwrap() - 1.0).abs() < 1e-9);

        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 64)) & 1) as f64 - (i as f64)).collect();
        if b.iter().any(|x| *x != 0.0) {
            let vb = EmbeddingVector::new(b).unwrap();
            let ab = cosine_similarity(&va, &vb).unwrap();
            let ba = cosine_similarity(&vb, &va).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn filter_is_monotone_and_partitions(
        rows in vec((text(), text()), 1..10),
        tau_low in 0.0f64..1.0,
        delta in 0.0f64..1.0,
    ) {
        let tau_high = (tau_low + delta).min(1.0);
        let mut originals = HashMap::new();
        let mut samples = Vec::new();
        for (i, (orig, generated)) in rows.iter().enumerate() {
            let id = format!("s{i}");
            originals.insert(id.clone(), Sentence::new(&id, orig, []).unwrap());
            samples.push(AugmentedSample {
                orig_id: id,
                generated_text: generated.clone(),
                pairs: PairSet::new(),
                similarity: None,
                backend_id: "test".into(),
            });
        }
        let provider = HashedBagOfWords::new(64);
        let scores = score_samples(&samples, &originals, &provider, 2).unwrap();
        let (low, low_report) = apply_threshold(&samples, &scores, tau_low).unwrap();
        let (high, high_report) = apply_threshold(&samples, &scores, tau_high).unwrap();
        prop_assert_eq!(low_report.n_retained + low_report.n_discarded, samples.len());
        prop_assert_eq!(high_report.n_retained + high_report.n_discarded, samples.len());
        prop_assert!(high.len() <= low.len());
        for s in &high {
            prop_assert!(low.iter().any(|l| l.orig_id == s.orig_id));
        }
        for s in &low {
            prop_assert!(s.similarity.unwrap() >= tau_low);
        }
    }

    #[test]
    fn one_token_changes_few_buckets(words in vec(prop::sample::select(WORDS.to_vec()), 3..12), pos in any::<prop::sample::Index>(), replacement in "[a-z]{3,8}") {
        let featurizer = Featurizer::new(4096, 0, Vec::new());
        let mut changed = words.clone();
        let i = pos.index(words.len());
        changed[i] = &replacement;
        let a = featurizer.featurize(&words.join(" "), None).unwrap().to_dense();
        let b = featurizer.featurize(&changed.join(" "), None).unwrap().to_dense();
        let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        prop_assert!(differing <= 6, "{differing} buckets changed");
    }

    #[test]
    fn softmax_is_a_distribution(logits in vec(-50.0f64..50.0, 1..8)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn confidence_is_gold_probability_when_positive(p in distribution(), y in 0usize..3) {
        let v = confidence_value(&p, y).unwrap();
        if v > 0.0 {
            prop_assert_eq!(v, p[y]);
            prop_assert_eq!(argmax(&p), y);
        } else {
            prop_assert_ne!(argmax(&p), y);
        }
    }

    #[test]
    fn weighted_loss_orders_in_alpha(p in distribution(), y in 0usize..3, a1 in 0.0f64..2.0, a2 in 0.0f64..2.0) {
        let ce = ce_loss(&p, y).unwrap();
        let v = confidence_value(&p, y).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(weighted_loss(ce, v, lo) <= weighted_loss(ce, v, hi));
        prop_assert!(weighted_loss(ce, v, lo) >= ce);
    }

    #[test]
    fn batch_weighted_loss_bounds_mean_ce(batch in vec((distribution(), 0usize..3), 1..16), alpha in 0.0f64..2.0) {
        let n = batch.len() as f64;
        let mean_ce: f64 = batch.iter().map(|(p, y)| ce_loss(p, *y).unwrap()).sum::<f64>() / n;
        let mean_l: f64 = batch
            .iter()
            .map(|(p, y)| weighted_loss(ce_loss(p, *y).unwrap(), confidence_value(p, *y).unwrap(), alpha))
            .sum::<f64>()
            / n;
        prop_assert!(mean_l >= mean_ce - 1e-12);
    }
}
