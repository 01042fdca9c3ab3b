use std::collections::{BTreeMap, BTreeSet};

use acsa_forge_core::dataset::{CategorySentimentPair, PairSet, Sentiment};
use acsa_forge_core::eval::{error_breakdown, micro_prf, sentence_errors, Golds, Predictions};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

const CATEGORIES: [&str; 4] = ["A#G", "F#Q", "S#G", "P#G"];

fn pair_set() -> impl Strategy<Value = PairSet> {
    vec((prop::sample::select(CATEGORIES.to_vec()), prop::sample::select(Sentiment::ALL.to_vec())), 0..5)
        .prop_map(|v| v.into_iter().map(|(c, s)| CategorySentimentPair::new(c, s).unwrap()).collect())
}

fn instance() -> impl Strategy<Value = (Predictions, Golds)> {
    btree_map("s[0-9]", pair_set(), 1..8).prop_flat_map(|golds| {
        let ids: Vec<String> = golds.keys().cloned().collect();
        let preds = vec((prop::sample::select(ids), pair_set()), 0..8)
            .prop_map(|rows| rows.into_iter().collect::<BTreeMap<_, _>>());
        (preds, Just(golds))
    })
}

/// Flat triple sets and textbook formulas.
fn brute_force(preds: &Predictions, golds: &Golds) -> (f64, f64, f64) {
    let flatten = |m: &BTreeMap<String, PairSet>| -> BTreeSet<(String, String, Sentiment)> {
        m.iter()
            .flat_map(|(id, ps)| ps.iter().map(move |p| (id.clone(), p.category.clone(), p.sentiment)))
            .collect()
    };
    let p = flatten(preds);
    let g = flatten(golds);
    let tp = p.intersection(&g).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force((preds, golds) in instance()) {
        let r = micro_prf(&preds, &golds).unwrap();
        let (p, rc, f) = brute_force(&preds, &golds);
        prop_assert!((r.precision - p).abs() < 1e-12);
        prop_assert!((r.recall - rc).abs() < 1e-12);
        prop_assert!((r.f1 - f).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_sentence_order((preds, golds) in instance(), rotate in 0usize..8) {
        // Rebuild both maps from rotated entry lists; the scorer must not care.
        let mut pv: Vec<_> = preds.clone().into_iter().collect();
        let mut gv: Vec<_> = golds.clone().into_iter().collect();
        if !pv.is_empty() { let k = rotate % pv.len(); pv.rotate_left(k); }
        let k = rotate % gv.len();
        gv.rotate_left(k);
        let preds2: Predictions = pv.into_iter().rev().collect();
        let golds2: Golds = gv.into_iter().rev().collect();
        prop_assert_eq!(micro_prf(&preds, &golds).unwrap(), micro_prf(&preds2, &golds2).unwrap());
    }

    #[test]
    fn breakdown_is_consistent((preds, golds) in instance()) {
        let b = error_breakdown(&preds, &golds).unwrap();
        let r = micro_prf(&preds, &golds).unwrap();
        prop_assert_eq!(r.n_correct + b.n_category_errors + b.n_sentiment_errors, r.n_pred);
        prop_assert_eq!(b.per_category_errors.values().sum::<usize>(), b.n_category_errors + b.n_sentiment_errors);
        for (id, p) in &preds {
            let e = sentence_errors(p, &golds[id]);
            prop_assert_eq!(e.true_positives + e.category_errors + e.sentiment_errors, p.len());
        }
    }
}
