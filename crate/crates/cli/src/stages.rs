//! Pipeline stages. Each reads the artifacts of earlier stages from the
//! output directory and writes its own subdirectory plus a manifest.
//!
//! ```text
//! <out>/ingest/   train.jsonl test.jsonl stats.json
//! <out>/augment/  augmented.jsonl report.json
//! <out>/filter/   filtered.jsonl report.json
//! <out>/train/    model.json train_log.jsonl train_set.jsonl report.json
//! <out>/eval/     report.json predictions.jsonl
//! <out>/report/   summary.json summary.md
//! <out>/sweep/    sweep.json sweep.csv [augmented.jsonl]
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acsa_forge_core::augment::{augment_dataset, AugmentReport, AugmentedSample, GenerationBackend};
use acsa_forge_core::dataset::{self, compute_stats, split_seeded, DatasetStats, Sentence};
use acsa_forge_core::eval::{acsc_eval, error_breakdown, golds_from, micro_prf, ErrorBreakdown, EvalReport, Predictions};
use acsa_forge_core::filter::{apply_threshold, index_by_id, score_samples, EmbeddingProvider, FilterReport, Score};
use acsa_forge_core::registry::{BackendRegistry, EmbedderRegistry};
use acsa_forge_core::trainer::{self, ModelParams, TrainConfig, TrainError};
use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::{read_json, read_jsonl, require, write_json, write_jsonl, StageWriter};

pub const INGEST_TRAIN: &str = "ingest/train.jsonl";
pub const INGEST_TEST: &str = "ingest/test.jsonl";
pub const INGEST_STATS: &str = "ingest/stats.json";
pub const AUGMENTED: &str = "augment/augmented.jsonl";
pub const AUGMENT_REPORT: &str = "augment/report.json";
pub const FILTERED: &str = "filter/filtered.jsonl";
pub const FILTER_REPORT: &str = "filter/report.json";
pub const MODEL: &str = "train/model.json";
pub const TRAIN_REPORT: &str = "train/report.json";
pub const EVAL_REPORT: &str = "eval/report.json";
pub const SWEEP_JSON: &str = "sweep/sweep.json";

/// Everything a stage needs: the effective config, strictness and the
/// strategy registries.
pub struct Context {
    pub config: PipelineConfig,
    pub strict: bool,
    pub backends: BackendRegistry,
    pub embedders: EmbedderRegistry,
}

impl Context {
    pub fn new(config: PipelineConfig, strict: bool) -> Self {
        Self {
            config,
            strict,
            backends: BackendRegistry::with_builtins(),
            embedders: EmbedderRegistry::with_builtins(),
        }
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn path(&self, relative: &str) -> PathBuf {
        self.out().join(relative)
    }

    fn backend(&self) -> Result<Box<dyn GenerationBackend>> {
        Ok(self
            .backends
            .create(&self.config.augment.backend, &self.config.backend_settings())?)
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(self
            .embedders
            .create(&self.config.filter.embedder, &self.config.embedder_settings())?)
    }

    fn load_sentences(&self, relative: &str, hint: &str) -> Result<Vec<Sentence>> {
        let path = self.path(relative);
        require(&path, hint)?;
        Ok(dataset::read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?)
    }
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train: DatasetStats,
    pub test: DatasetStats,
    /// Records dropped by lenient XML parsing.
    pub n_skipped_records: usize,
    /// True when the test set was held out of the training file.
    pub split_from_train: bool,
}

fn load_input(path: &Path, lenient: bool) -> Result<(Vec<Sentence>, usize)> {
    let is_xml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"));
    if is_xml && lenient {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = dataset::parse_semeval_xml_lenient(&bytes);
        for err in &parsed.skipped {
            log::warn!("{}: skipped record: {err}", path.display());
        }
        return Ok((parsed.sentences, parsed.skipped.len()));
    }
    let sentences = dataset::load(path, lenient).with_context(|| format!("loading {}", path.display()))?;
    Ok((sentences, 0))
}

pub fn ingest(ctx: &Context) -> Result<IngestSummary> {
    let data = &ctx.config.data;
    let train_path = data
        .train
        .as_deref()
        .context("no training data configured; set data.train or pass --train")?;
    require(train_path, "check data.train")?;
    if let Some(test) = &data.test {
        require(test, "check data.test")?;
    }

    let mut stage = StageWriter::new(ctx.out(), "ingest")?;
    stage.external_input("data.train", train_path)?;
    let (all_train, mut skipped) = load_input(train_path, data.lenient)?;
    let (train, test, split_from_train) = match &data.test {
        Some(test_path) => {
            stage.external_input("data.test", test_path)?;
            let (test, n) = load_input(test_path, data.lenient)?;
            skipped += n;
            (all_train, test, false)
        }
        None => {
            let (test, train) = split_seeded(&all_train, data.test_fraction, ctx.config.seed)?;
            (train, test, true)
        }
    };
    if train.is_empty() {
        bail!("training set is empty");
    }

    dataset::write_jsonl(&train, stage.output("train.jsonl"))?;
    dataset::write_jsonl(&test, stage.output("test.jsonl"))?;
    let summary = IngestSummary {
        train: compute_stats(&train),
        test: compute_stats(&test),
        n_skipped_records: skipped,
        split_from_train,
    };
    write_json(&stage.output("stats.json"), &summary)?;
    stage.finish(&ctx.config)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

/// Generates paraphrases for the training split. Partial failures are
/// reported and only fatal under `--strict`, after the artifacts are written.
pub fn augment(ctx: &Context) -> Result<AugmentReport> {
    let train = ctx.load_sentences(INGEST_TRAIN, "run `ingest` first")?;
    let backend = ctx.backend()?;
    let mut stage = StageWriter::new(ctx.out(), "augment")?;
    stage.input(INGEST_TRAIN)?;

    let (samples, report) = augment_dataset(
        &train,
        backend.as_ref(),
        &ctx.config.template()?,
        &ctx.config.generation_config(),
    )?;
    write_jsonl(&stage.output("augmented.jsonl"), &samples)?;
    write_json(&stage.output("report.json"), &report)?;
    stage.finish(&ctx.config)?;

    if !report.failures.is_empty() {
        log::warn!(
            "{} of {} generations failed; see {}",
            report.failures.len(),
            report.n_attempted,
            AUGMENT_REPORT
        );
        if ctx.strict {
            bail!("{} generation(s) failed (--strict)", report.failures.len());
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

fn scores_for(ctx: &Context, samples: &[AugmentedSample], originals: &[Sentence]) -> Result<Vec<Score>> {
    let embedder = ctx.embedder()?;
    let index: HashMap<String, Sentence> = index_by_id(originals);
    Ok(score_samples(samples, &index, embedder.as_ref(), ctx.config.filter.max_in_flight)?)
}

pub fn filter(ctx: &Context) -> Result<FilterReport> {
    let originals = ctx.load_sentences(INGEST_TRAIN, "run `ingest` first")?;
    let augmented_path = ctx.path(AUGMENTED);
    require(&augmented_path, "run `augment` first")?;
    let samples: Vec<AugmentedSample> = read_jsonl(&augmented_path)?;

    let mut stage = StageWriter::new(ctx.out(), "filter")?;
    stage.input(INGEST_TRAIN)?;
    stage.input(AUGMENTED)?;
    let scores = scores_for(ctx, &samples, &originals)?;
    let (retained, report) = apply_threshold(&samples, &scores, ctx.config.filter.tau)?;
    write_jsonl(&stage.output("filtered.jsonl"), &retained)?;
    write_json(&stage.output("report.json"), &report)?;
    stage.finish(&ctx.config)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Originals followed by retained samples, numbered per original.
pub fn training_set(originals: &[Sentence], retained: &[AugmentedSample]) -> Vec<Sentence> {
    let mut out = originals.to_vec();
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for sample in retained {
        let k = counters.entry(sample.orig_id.as_str()).or_insert(0);
        out.push(sample.to_sentence(*k));
        *k += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub alpha: f64,
    pub n_train_sentences: usize,
    pub n_augmented: usize,
    pub n_categories: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    pub mean_confidence_correct: f64,
    pub final_acd_loss: Option<f64>,
}

pub fn train(ctx: &Context) -> Result<TrainSummary> {
    let originals = ctx.load_sentences(INGEST_TRAIN, "run `ingest` first")?;
    let mut stage = StageWriter::new(ctx.out(), "train")?;
    stage.input(INGEST_TRAIN)?;
    let retained: Vec<AugmentedSample> = if ctx.config.train.use_augmented {
        let path = ctx.path(FILTERED);
        require(&path, "run `filter` first, or set train.use_augmented = false")?;
        stage.input(FILTERED)?;
        read_jsonl(&path)?
    } else {
        Vec::new()
    };
    let train_set = training_set(&originals, &retained);
    let config = ctx.config.train_config();
    let (params, report) = trainer::train(&train_set, &config)?;

    params.save(stage.output("model.json"))?;
    report.write_log(stage.output("train_log.jsonl"))?;
    dataset::write_jsonl(&train_set, stage.output("train_set.jsonl"))?;
    let summary = TrainSummary {
        alpha: config.alpha,
        n_train_sentences: train_set.len(),
        n_augmented: retained.len(),
        n_categories: params.categories.len(),
        final_loss: report.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        final_train_accuracy: report.final_train_accuracy,
        mean_confidence_correct: report.mean_confidence_correct,
        final_acd_loss: report.acd_epoch_losses.last().copied(),
    };
    write_json(&stage.output("report.json"), &summary)?;
    stage.finish(&ctx.config)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_test_sentences: usize,
    /// Sentences without any token; they get an empty prediction.
    pub n_untokenizable: usize,
    /// Joint (category, sentiment) scoring.
    pub acsa: EvalReport,
    /// Sentiment scoring given the gold categories.
    pub acsc: EvalReport,
    pub errors: ErrorBreakdown,
}

/// Scores `params` on `test`, returning the summary and per-sentence predictions.
pub fn evaluate(params: &ModelParams, test: &[Sentence], acd_threshold: f64) -> Result<(EvalSummary, Vec<Sentence>)> {
    let golds = golds_from(test);
    let mut predictions = Predictions::new();
    let mut acsc_predictions = BTreeMap::new();
    let mut rows = Vec::with_capacity(test.len());
    let mut n_untokenizable = 0;
    for sentence in test {
        let pairs = match trainer::predict_acsa(params, &sentence.text, &params.categories, acd_threshold) {
            Ok(pairs) => pairs,
            Err(TrainError::EmptyText) => {
                n_untokenizable += 1;
                Default::default()
            }
            Err(e) => return Err(e.into()),
        };
        for category in sentence.categories() {
            match trainer::predict_sentiment(params, &sentence.text, category) {
                Ok(Some(s)) => {
                    acsc_predictions.insert((sentence.id.clone(), category.to_string()), s);
                }
                Ok(None) | Err(TrainError::EmptyText) => {}
                Err(e) => return Err(e.into()),
            }
        }
        rows.push(Sentence {
            id: sentence.id.clone(),
            text: sentence.text.clone(),
            pairs: pairs.clone(),
        });
        predictions.insert(sentence.id.clone(), pairs);
    }
    let summary = EvalSummary {
        n_test_sentences: test.len(),
        n_untokenizable,
        acsa: micro_prf(&predictions, &golds)?,
        acsc: acsc_eval(&acsc_predictions, &golds)?,
        errors: error_breakdown(&predictions, &golds)?,
    };
    Ok((summary, rows))
}

pub fn eval(ctx: &Context) -> Result<EvalSummary> {
    let test = ctx.load_sentences(INGEST_TEST, "run `ingest` first")?;
    let model_path = ctx.path(MODEL);
    require(&model_path, "run `train` first")?;
    let params = ModelParams::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;

    let mut stage = StageWriter::new(ctx.out(), "eval")?;
    stage.input(INGEST_TEST)?;
    stage.input(MODEL)?;
    let (summary, rows) = evaluate(&params, &test, ctx.config.train.acd_threshold)?;
    write_json(&stage.output("report.json"), &summary)?;
    dataset::write_jsonl(&rows, stage.output("predictions.jsonl"))?;
    stage.finish(&ctx.config)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub tau: f64,
    pub n_input: usize,
    pub n_retained: usize,
    pub n_discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub data: IngestSummary,
    pub augment: Option<AugmentReport>,
    pub filter: Option<FilterCounts>,
    pub train: Option<TrainSummary>,
    pub eval: EvalSummary,
    pub sweep: Option<Vec<SweepRow>>,
}

fn read_optional<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.is_file() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn fmt_prf(r: &EvalReport) -> String {
    format!(
        "P {:.4}  R {:.4}  F1 {:.4}  ({} correct / {} predicted / {} gold)",
        r.precision, r.recall, r.f1, r.n_correct, r.n_pred, r.n_gold
    )
}

fn render_markdown(s: &RunSummary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# acsa-forge run\n");
    let _ = writeln!(md, "config `{}`, seed {}\n", &s.config_hash[..12], s.seed);
    let _ = writeln!(md, "## Data\n");
    let _ = writeln!(md, "| split | sentences | labeled | categories | positive | neutral | negative |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for (name, st) in [("train", &s.data.train), ("test", &s.data.test)] {
        let _ = writeln!(
            md,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            st.n_sentences, st.n_labeled_sentences, st.n_categories_distinct, st.n_positive, st.n_neutral, st.n_negative
        );
    }
    if let Some(a) = &s.augment {
        let _ = writeln!(md, "\n## Augmentation\n");
        let _ = writeln!(md, "{} generated of {} attempted, {} failed", a.n_generated, a.n_attempted, a.failures.len());
    }
    if let Some(f) = &s.filter {
        let _ = writeln!(md, "\n## Filtering\n");
        let _ = writeln!(md, "tau {}: {} retained, {} discarded of {}", f.tau, f.n_retained, f.n_discarded, f.n_input);
    }
    if let Some(t) = &s.train {
        let _ = writeln!(md, "\n## Training\n");
        let _ = writeln!(
            md,
            "alpha {}, {} sentences ({} augmented), final loss {:.6}, train accuracy {:.4}",
            t.alpha, t.n_train_sentences, t.n_augmented, t.final_loss, t.final_train_accuracy
        );
    }
    let _ = writeln!(md, "\n## Evaluation\n");
    let _ = writeln!(md, "- ACSA: {}", fmt_prf(&s.eval.acsa));
    let _ = writeln!(md, "- ACSC: {}", fmt_prf(&s.eval.acsc));
    let e = &s.eval.errors;
    let _ = writeln!(md, "- errors: {} category, {} sentiment", e.n_category_errors, e.n_sentiment_errors);
    if !e.per_category_errors.is_empty() {
        let _ = writeln!(md, "\n| category | errors |\n|---|---|");
        for (category, n) in &e.per_category_errors {
            let _ = writeln!(md, "| {category} | {n} |");
        }
    }
    if let Some(rows) = &s.sweep {
        let _ = writeln!(md, "\n## Sweep\n");
        let _ = writeln!(md, "| alpha | tau | P | R | F1 | train samples |\n|---|---|---|---|---|---|");
        for r in rows {
            match (r.precision, r.recall, r.f1, r.n_train_samples) {
                (Some(p), Some(rc), Some(f), Some(n)) => {
                    let _ = writeln!(md, "| {} | {} | {p:.4} | {rc:.4} | {f:.4} | {n} |", r.alpha, r.tau);
                }
                _ => {
                    let _ = writeln!(md, "| {} | {} | failed | | | |", r.alpha, r.tau);
                }
            }
        }
    }
    md
}

pub fn report(ctx: &Context) -> Result<RunSummary> {
    let stats_path = ctx.path(INGEST_STATS);
    require(&stats_path, "run `ingest` first")?;
    let eval_path = ctx.path(EVAL_REPORT);
    require(&eval_path, "run `eval` first")?;

    let mut stage = StageWriter::new(ctx.out(), "report")?;
    let mut optional = |relative: &str| -> Result<bool> {
        let present = ctx.path(relative).is_file();
        if present {
            stage.input(relative)?;
        }
        Ok(present)
    };
    optional(INGEST_STATS)?;
    optional(EVAL_REPORT)?;
    optional(AUGMENT_REPORT)?;
    optional(FILTER_REPORT)?;
    optional(TRAIN_REPORT)?;
    optional(SWEEP_JSON)?;

    let filter: Option<FilterReport> = read_optional(&ctx.path(FILTER_REPORT))?;
    let summary = RunSummary {
        config_hash: ctx.config.hash(),
        seed: ctx.config.seed,
        data: read_json(&stats_path)?,
        augment: read_optional(&ctx.path(AUGMENT_REPORT))?,
        filter: filter.map(|f| FilterCounts {
            tau: f.tau,
            n_input: f.n_input,
            n_retained: f.n_retained,
            n_discarded: f.n_discarded,
        }),
        train: read_optional(&ctx.path(TRAIN_REPORT))?,
        eval: read_json(&eval_path)?,
        sweep: read_optional::<SweepTable>(&ctx.path(SWEEP_JSON))?.map(|t| t.rows),
    };
    write_json(&stage.output("summary.json"), &summary)?;
    std::fs::write(stage.output("summary.md"), render_markdown(&summary))?;
    stage.finish(&ctx.config)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub tau: f64,
    pub ok: bool,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub n_train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub n_augmented: usize,
    pub rows: Vec<SweepRow>,
}

/// Column layout of `sweep.csv`; failed points leave the metric cells empty.
#[derive(Serialize)]
struct CsvRow {
    alpha: f64,
    tau: f64,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    n_train_samples: Option<usize>,
}

fn sweep_point(
    originals: &[Sentence],
    test: &[Sentence],
    samples: &[AugmentedSample],
    scores: &[Score],
    config: &TrainConfig,
    tau: f64,
) -> Result<(EvalReport, usize)> {
    let (retained, _) = apply_threshold(samples, scores, tau)?;
    let train_set = training_set(originals, &retained);
    let (params, _) = trainer::train(&train_set, config)?;
    let (summary, _) = evaluate(&params, test, config.acd_threshold)?;
    Ok((summary.acsa, train_set.len()))
}

/// Augments and embeds once, then thresholds, trains and evaluates for every
/// (alpha, tau) pair in grid order. A failing point is recorded and skipped.
pub fn sweep(ctx: &Context) -> Result<SweepTable> {
    let grid = &ctx.config.sweep;
    if grid.alphas.is_empty() || grid.taus.is_empty() {
        bail!("sweep grid is empty; set sweep.alphas and sweep.taus");
    }
    let originals = ctx.load_sentences(INGEST_TRAIN, "run `ingest` first")?;
    let test = ctx.load_sentences(INGEST_TEST, "run `ingest` first")?;

    let mut stage = StageWriter::new(ctx.out(), "sweep")?;
    stage.input(INGEST_TRAIN)?;
    stage.input(INGEST_TEST)?;
    let samples: Vec<AugmentedSample> = if ctx.path(AUGMENTED).is_file() {
        log::info!("reusing {AUGMENTED}");
        stage.input(AUGMENTED)?;
        read_jsonl(&ctx.path(AUGMENTED))?
    } else {
        let (samples, report) = augment_dataset(
            &originals,
            ctx.backend()?.as_ref(),
            &ctx.config.template()?,
            &ctx.config.generation_config(),
        )?;
        if !report.failures.is_empty() {
            log::warn!("{} generation(s) failed during the sweep", report.failures.len());
            if ctx.strict {
                bail!("{} generation(s) failed (--strict)", report.failures.len());
            }
        }
        write_jsonl(&stage.output("augmented.jsonl"), &samples)?;
        samples
    };
    let scores = scores_for(ctx, &samples, &originals)?;

    let base = ctx.config.train_config();
    let mut rows = Vec::new();
    for &alpha in &grid.alphas {
        for &tau in &grid.taus {
            let config = TrainConfig { alpha, ..base.clone() };
            let row = match sweep_point(&originals, &test, &samples, &scores, &config, tau) {
                Ok((r, n)) => SweepRow {
                    alpha,
                    tau,
                    ok: true,
                    precision: Some(r.precision),
                    recall: Some(r.recall),
                    f1: Some(r.f1),
                    n_train_samples: Some(n),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep point alpha={alpha} tau={tau} failed: {e:#}");
                    SweepRow {
                        alpha,
                        tau,
                        ok: false,
                        precision: None,
                        recall: None,
                        f1: None,
                        n_train_samples: None,
                        error: Some(format!("{e:#}")),
                    }
                }
            };
            log::info!("alpha={alpha} tau={tau} f1={:?}", row.f1);
            rows.push(row);
        }
    }

    let table = SweepTable {
        alphas: grid.alphas.clone(),
        taus: grid.taus.clone(),
        n_augmented: samples.len(),
        rows,
    };
    write_json(&stage.output("sweep.json"), &table)?;
    let mut csv = csv::Writer::from_path(stage.output("sweep.csv"))?;
    for r in &table.rows {
        csv.serialize(CsvRow {
            alpha: r.alpha,
            tau: r.tau,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            n_train_samples: r.n_train_samples,
        })?;
    }
    csv.flush()?;
    drop(csv);
    stage.finish(&ctx.config)?;

    let failed = table.rows.iter().filter(|r| !r.ok).count();
    if failed > 0 && ctx.strict {
        bail!("{failed} sweep point(s) failed (--strict)");
    }
    Ok(table)
}
