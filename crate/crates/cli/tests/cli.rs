use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acsa_forge::manifest::{sha256_file, Manifest, LOCK_FILE};
use acsa_forge::stages::{EvalSummary, SweepTable};
use acsa_forge_core::dataset::{read_jsonl, Sentence, Sentiment};
use acsa_forge_core::trainer::{Featurizer, ModelParams};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Runs the binary with the fixture data and a short training schedule.
fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acsa-forge"))
        .arg("--out")
        .arg(out)
        .arg("--seed")
        .arg("11")
        .arg("--set")
        .arg(format!("data.train={}", fixture("restaurant_train.jsonl").display()))
        .arg("--set")
        .arg(format!("data.test={}", fixture("restaurant_test.jsonl").display()))
        .args(["--set", "train.epochs=40", "--set", "train.feature_dim=512", "--set", "augment.retry_backoff_ms=0"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn read_value(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn full_pipeline(out: &Path) {
    for stage in ["ingest", "augment", "filter", "train", "eval", "report"] {
        ok(out, &[stage]);
    }
}

#[test]
fn missing_inputs_exit_nonzero_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    for (stage, hint) in [
        ("augment", "run `ingest` first"),
        ("train", "run `ingest` first"),
        ("eval", "run `ingest` first"),
        ("sweep", "run `ingest` first"),
    ] {
        let o = run(dir.path(), &[stage]);
        assert!(!o.status.success(), "{stage} should fail");
        assert!(String::from_utf8_lossy(&o.stderr).contains(hint), "{stage}");
    }
    ok(dir.path(), &["ingest"]);
    let o = run(dir.path(), &["filter"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `augment` first"));

    let o = Command::new(env!("CARGO_BIN_EXE_acsa-forge"))
        .args(["--out"])
        .arg(dir.path())
        .args(["ingest", "--train", "/nonexistent/train.jsonl"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing input"));
}

#[test]
fn tau_zero_keeps_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ingest"]);
    ok(dir.path(), &["augment"]);
    ok(dir.path(), &["filter", "--tau", "0"]);
    let report = read_value(&dir.path().join("filter/report.json"));
    assert_eq!(report["n_retained"], report["n_input"]);
    assert_eq!(report["n_retained"], 19);

    ok(dir.path(), &["filter", "--tau", "0.7"]);
    let report = read_value(&dir.path().join("filter/report.json"));
    assert!(report["n_retained"].as_u64().unwrap() < 19);
}

#[test]
fn partial_generation_failures_warn_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ingest"]);
    let http = [
        "--set",
        "augment.max_retries=0",
        "--set",
        "augment.timeout_secs=2",
        "augment",
        "--backend",
        "http",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
    ];
    let o = run(dir.path(), &http);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generations failed"));
    let report = read_value(&dir.path().join("augment/report.json"));
    assert_eq!(report["failures"].as_array().unwrap().len(), 19);

    let mut strict = vec!["--strict"];
    strict.extend_from_slice(&http);
    let o = run(dir.path(), &strict);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--strict"));
    // Artifacts are still written for inspection.
    assert!(dir.path().join("augment/report.json").is_file());
}

#[test]
fn an_existing_lock_blocks_the_command() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "12345\n").unwrap();
    let o = run(dir.path(), &["ingest"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked by process 12345"));
    assert!(dir.path().join(LOCK_FILE).exists());
    fs::remove_file(dir.path().join(LOCK_FILE)).unwrap();
    ok(dir.path(), &["ingest"]);
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "[filter]\ntau = 0.6\n[train]\nalpha = 0.3\n").unwrap();
    let out = dir.path().join("out");
    let cfg = config.to_str().unwrap();
    ok(&out, &["--config", cfg, "ingest"]);
    ok(&out, &["--config", cfg, "augment"]);
    ok(&out, &["--config", cfg, "filter"]);
    assert_eq!(read_value(&out.join("filter/report.json"))["tau"], 0.6);
    ok(&out, &["--config", cfg, "filter", "--tau", "0.8"]);
    assert_eq!(read_value(&out.join("filter/report.json"))["tau"], 0.8);
    let stdout = ok(&out, &["--config", cfg, "train"]);
    assert!(stdout.contains("alpha 0.3"), "{stdout}");
    let stdout = ok(&out, &["--config", cfg, "train", "--alpha", "0.9"]);
    assert!(stdout.contains("alpha 0.9"), "{stdout}");
}

#[test]
fn manifests_verify_and_survive_downstream_deletion() {
    let dir = tempfile::tempdir().unwrap();
    full_pipeline(dir.path());
    fs::remove_dir_all(dir.path().join("eval")).unwrap();
    fs::remove_dir_all(dir.path().join("report")).unwrap();
    for stage in ["ingest", "augment", "filter", "train"] {
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(dir.path().join(stage).join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.stage, stage);
        assert_eq!(manifest.seed, 11);
        assert!(!manifest.outputs.is_empty());
        for (relative, digest) in manifest.outputs.iter().chain(&manifest.inputs) {
            if relative.contains('/') {
                assert_eq!(&sha256_file(&dir.path().join(relative)).unwrap(), digest, "{relative}");
            }
        }
    }
    // Re-running eval from the intact upstream artifacts works.
    ok(dir.path(), &["eval"]);
}

#[test]
fn sweep_grid_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ingest"]);
    ok(dir.path(), &["sweep", "--alphas", "0.2,0.2", "--taus", "0.6,0.8"]);
    let table: SweepTable =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.ok));
    assert_eq!(table.rows[0].f1, table.rows[2].f1);
    assert_eq!(table.rows[1].f1, table.rows[3].f1);
    assert!(table.rows[0].n_train_samples >= table.rows[1].n_train_samples);
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha,tau,precision,recall,f1,n_train_samples"));
    assert_eq!(lines.count(), 4);

    ok(dir.path(), &["sweep", "--taus", "0.7"]);
    let table: SweepTable =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep/sweep.json")).unwrap()).unwrap();
    let alphas: Vec<f64> = table.rows.iter().map(|r| r.alpha).collect();
    assert_eq!(alphas, [0.2, 0.4, 0.6, 0.8, 1.0]);
}

#[test]
fn failing_sweep_points_are_marked_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ingest"]);
    ok(dir.path(), &["sweep", "--alphas", "0.5,-1", "--taus", "0.7,1.5"]);
    let table: SweepTable =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep/sweep.json")).unwrap()).unwrap();
    let ok_flags: Vec<bool> = table.rows.iter().map(|r| r.ok).collect();
    assert_eq!(ok_flags, [true, false, false, false]);
    assert!(table.rows[1].error.as_deref().unwrap().contains("threshold"));
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().ends_with(",,,,"));

    let o = run(dir.path(), &["--strict", "sweep", "--alphas", "-1", "--taus", "0.7"]);
    assert!(!o.status.success());
}

#[test]
fn report_collects_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    full_pipeline(dir.path());
    let summary = read_value(&dir.path().join("report/summary.json"));
    assert_eq!(summary["data"]["train"]["n_sentences"], 20);
    assert_eq!(summary["augment"]["n_generated"], 19);
    assert!(summary["train"]["n_train_sentences"].as_u64().unwrap() > 20);
    let md = fs::read_to_string(dir.path().join("report/summary.md")).unwrap();
    assert!(md.contains("## Evaluation"));
}

// ---------------------------------------------------------------------------
// alpha = 0 against an independent plain cross-entropy trainer
// ---------------------------------------------------------------------------

struct Reference {
    acsc_w: Vec<f64>,
    acsc_b: Vec<f64>,
    acd_w: Vec<f64>,
    acd_b: Vec<f64>,
}

fn dense(f: &Featurizer, text: &str, category: Option<&str>) -> Vec<f64> {
    f.featurize(text, category).unwrap().to_dense()
}

/// Plain softmax CE for the sentiment head and per-label logistic loss for
/// the detection head, with the documented random-stream order.
fn reference_train(train: &[Sentence], categories: &[String], seed: u64, lr: f64, epochs: usize, batch: usize, dim: usize) -> Reference {
    let f = Featurizer::new(dim, 0, categories.to_vec());
    let k = categories.len();
    let mut acsc: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut acd: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for s in train.iter().filter(|s| s.is_labeled()) {
        let mut targets = vec![0.0; k];
        for p in &s.pairs {
            let c = categories.iter().position(|c| *c == p.category).unwrap();
            targets[c] = 1.0;
            acsc.push((dense(&f, &s.text, Some(&p.category)), p.sentiment.index()));
        }
        acd.push((dense(&f, &s.text, None), targets));
    }
    let pd = dim + k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Uniform::new_inclusive(-0.01, 0.01);
    let mut acsc_w: Vec<f64> = (0..3 * pd).map(|_| init.sample(&mut rng)).collect();
    let mut acsc_b: Vec<f64> = (0..3).map(|_| init.sample(&mut rng)).collect();
    let mut order: Vec<usize> = (0..acsc.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; 3 * pd];
            let mut gb = [0.0; 3];
            for &i in chunk {
                let (x, y) = &acsc[i];
                let z: Vec<f64> = (0..3)
                    .map(|c| (0..pd).map(|j| acsc_w[c * pd + j] * x[j]).sum::<f64>() + acsc_b[c])
                    .collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in 0..3 {
                    let g = e[c] / total - if c == *y { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for j in 0..pd {
                        gw[c * pd + j] += g * x[j];
                    }
                }
            }
            let n = chunk.len() as f64;
            acsc_w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g / n);
            acsc_b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g / n);
        }
    }
    let mut acd_w: Vec<f64> = (0..k * dim).map(|_| init.sample(&mut rng)).collect();
    let mut acd_b: Vec<f64> = (0..k).map(|_| init.sample(&mut rng)).collect();
    let mut order: Vec<usize> = (0..acd.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; k * dim];
            let mut gb = vec![0.0; k];
            for &i in chunk {
                let (x, t) = &acd[i];
                for c in 0..k {
                    let z = (0..dim).map(|j| acd_w[c * dim + j] * x[j]).sum::<f64>() + acd_b[c];
                    let g = 1.0 / (1.0 + (-z).exp()) - t[c];
                    gb[c] += g;
                    for j in 0..dim {
                        gw[c * dim + j] += g * x[j];
                    }
                }
            }
            let n = chunk.len() as f64;
            acd_w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g / n);
            acd_b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g / n);
        }
    }
    Reference { acsc_w, acsc_b, acd_w, acd_b }
}

/// (correct, predicted, gold) counts for joint and gold-category scoring.
fn reference_counts(r: &Reference, test: &[Sentence], categories: &[String], dim: usize) -> ((usize, usize, usize), (usize, usize, usize)) {
    let f = Featurizer::new(dim, 0, categories.to_vec());
    let pd = dim + categories.len();
    let sentiment = |text: &str, c: &str| -> Sentiment {
        let x = dense(&f, text, Some(c));
        let z: Vec<f64> = (0..3)
            .map(|k| (0..pd).map(|j| r.acsc_w[k * pd + j] * x[j]).sum::<f64>() + r.acsc_b[k])
            .collect();
        let best = (0..3).fold(0, |b, k| if z[k] > z[b] { k } else { b });
        Sentiment::from_index(best).unwrap()
    };
    let (mut joint, mut acsc) = ((0, 0, 0), (0, 0, 0));
    for s in test {
        joint.2 += s.pairs.len();
        let x = dense(&f, &s.text, None);
        for (c, category) in categories.iter().enumerate() {
            let z = (0..dim).map(|j| r.acd_w[c * dim + j] * x[j]).sum::<f64>() + r.acd_b[c];
            if z >= 0.0 {
                joint.1 += 1;
                let p = sentiment(&s.text, category);
                if s.pairs.iter().any(|g| &g.category == category && g.sentiment == p) {
                    joint.0 += 1;
                }
            }
        }
        for category in s.categories() {
            acsc.2 += 1;
            if categories.iter().any(|c| c == category) {
                acsc.1 += 1;
                let p = sentiment(&s.text, category);
                if s.pairs.iter().any(|g| g.category == category && g.sentiment == p) {
                    acsc.0 += 1;
                }
            }
        }
    }
    (joint, acsc)
}

#[test]
fn alpha_zero_matches_plain_cross_entropy_reference() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [&["ingest"][..], &["augment"], &["filter"], &["train", "--alpha", "0"], &["eval"]] {
        ok(dir.path(), stage);
    }
    let train = read_jsonl(dir.path().join("train/train_set.jsonl")).unwrap();
    let test = read_jsonl(dir.path().join("ingest/test.jsonl")).unwrap();
    let params = ModelParams::load(dir.path().join("train/model.json")).unwrap();
    let (dim, lr, epochs, batch) = (512, 0.1, 40, 32);
    let reference = reference_train(&train, &params.categories, 11, lr, epochs, batch, dim);

    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff(&params.acsc.weights, &reference.acsc_w) < 1e-9);
    assert!(max_diff(&params.acsc.bias, &reference.acsc_b) < 1e-9);
    assert!(max_diff(&params.acd.weights, &reference.acd_w) < 1e-9);
    assert!(max_diff(&params.acd.bias, &reference.acd_b) < 1e-9);

    let summary: EvalSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let (joint, acsc) = reference_counts(&reference, &test, &params.categories, dim);
    assert_eq!((summary.acsa.n_correct, summary.acsa.n_pred, summary.acsa.n_gold), joint);
    assert_eq!((summary.acsc.n_correct, summary.acsc.n_pred, summary.acsc.n_gold), acsc);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    let files = |root: &Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for stage in fs::read_dir(root).unwrap() {
            let stage = stage.unwrap().path();
            for f in fs::read_dir(&stage).unwrap() {
                let f = f.unwrap().path();
                let key = f.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&f).unwrap());
            }
        }
        out
    };
    let fa = files(a.path());
    let fb = files(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{k} differs");
    }
}
