//! Command-line pipeline: ingest, augment, filter, train, eval, report and
//! sweep over a shared output directory.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::{parse_override, PipelineConfig};
use crate::manifest::OutputLock;
use crate::stages::Context;

#[derive(Debug, Parser)]
#[command(name = "acsa-forge", version, about = "Augment, filter, train and evaluate ACSA classifiers")]
pub struct Cli {
    /// TOML pipeline config.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for splitting, generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Treat partial failures as errors.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Override any config value, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load train/test data and write normalized JSONL plus statistics.
    Ingest(IngestArgs),
    /// Generate paraphrases of the training sentences.
    Augment(AugmentArgs),
    /// Drop paraphrases whose similarity to the original is below tau.
    Filter(FilterArgs),
    /// Train the classifier on originals plus retained paraphrases.
    Train(TrainArgs),
    /// Score the trained model on the test split.
    Eval,
    /// Collect stage outputs into a summary.
    Report,
    /// Filter, train and evaluate over an (alpha, tau) grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Held-out fraction when no test file is given.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Skip malformed XML records.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Generation backend name (mock, corrupting-mock, http).
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub n_per_sentence: Option<usize>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    /// Embedding provider name (mock, http).
    #[arg(long)]
    pub embedder: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Alpha preset: rest15, rest16, lap15, lap16.
    #[arg(long, requires = "task")]
    pub benchmark: Option<String>,
    /// Alpha preset task: acsc or acsa.
    #[arg(long, requires = "benchmark")]
    pub task: Option<String>,
    /// Train on the original sentences only.
    #[arg(long)]
    pub no_augmented: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Comma-separated tau values.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
}

fn push<T: Into<Value>>(out: &mut Vec<(String, Value)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.into()));
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn floats(values: &Option<Vec<f64>>) -> Option<Value> {
    values.as_ref().map(|v| Value::Array(v.iter().map(|x| Value::Float(*x)).collect()))
}

impl Cli {
    /// Overrides in application order: `--set` entries, then dedicated flags.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out = self
            .set
            .iter()
            .map(|raw| parse_override(raw))
            .collect::<Result<Vec<_>>>()?;
        push(&mut out, "seed", self.seed.map(|s| s as i64));
        push(&mut out, "out", path_value(&self.out));
        match &self.command {
            Command::Ingest(a) => {
                push(&mut out, "data.train", path_value(&a.train));
                push(&mut out, "data.test", path_value(&a.test));
                push(&mut out, "data.test_fraction", a.test_fraction);
                push(&mut out, "data.lenient", a.lenient.then_some(true));
            }
            Command::Augment(a) => {
                push(&mut out, "augment.backend", a.backend.clone());
                push(&mut out, "augment.endpoint", a.endpoint.clone());
                push(&mut out, "augment.model_name", a.model_name.clone());
                push(&mut out, "augment.n_per_sentence", a.n_per_sentence.map(|n| n as i64));
                push(&mut out, "augment.max_in_flight", a.max_in_flight.map(|n| n as i64));
            }
            Command::Filter(a) => {
                push(&mut out, "filter.tau", a.tau);
                push(&mut out, "filter.embedder", a.embedder.clone());
            }
            Command::Train(a) => {
                push(&mut out, "train.alpha", a.alpha);
                push(&mut out, "train.epochs", a.epochs.map(|n| n as i64));
                push(&mut out, "train.learning_rate", a.learning_rate);
                push(&mut out, "preset.benchmark", a.benchmark.clone());
                push(&mut out, "preset.task", a.task.clone());
                push(&mut out, "train.use_augmented", a.no_augmented.then_some(false));
            }
            Command::Sweep(a) => {
                push(&mut out, "sweep.alphas", floats(&a.alphas));
                push(&mut out, "sweep.taus", floats(&a.taus));
            }
            Command::Eval | Command::Report => {}
        }
        Ok(out)
    }
}

/// Runs one command under the output-directory lock.
pub fn run(cli: &Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides()?)?;
    let _lock = OutputLock::acquire(&config.out)?;
    let ctx = Context::new(config, cli.strict);
    match &cli.command {
        Command::Ingest(_) => {
            let s = stages::ingest(&ctx)?;
            println!(
                "ingest: {} train sentences ({} labeled, {} pairs), {} test sentences",
                s.train.n_sentences,
                s.train.n_labeled_sentences,
                s.train.n_pairs(),
                s.test.n_sentences
            );
        }
        Command::Augment(_) => {
            let r = stages::augment(&ctx)?;
            println!(
                "augment: {} generated of {} attempted, {} failed",
                r.n_generated,
                r.n_attempted,
                r.failures.len()
            );
        }
        Command::Filter(_) => {
            let r = stages::filter(&ctx)?;
            println!("filter: tau {}, {} retained, {} discarded", r.tau, r.n_retained, r.n_discarded);
        }
        Command::Train(_) => {
            let s = stages::train(&ctx)?;
            println!(
                "train: alpha {}, {} sentences, final loss {:.6}, train accuracy {:.4}",
                s.alpha, s.n_train_sentences, s.final_loss, s.final_train_accuracy
            );
        }
        Command::Eval => {
            let s = stages::eval(&ctx)?;
            println!(
                "eval: ACSA P {:.4} R {:.4} F1 {:.4}; ACSC F1 {:.4}; errors {} category / {} sentiment",
                s.acsa.precision,
                s.acsa.recall,
                s.acsa.f1,
                s.acsc.f1,
                s.errors.n_category_errors,
                s.errors.n_sentiment_errors
            );
        }
        Command::Report => {
            stages::report(&ctx)?;
            println!("report: {}", ctx.out().join("report/summary.md").display());
        }
        Command::Sweep(_) => {
            let t = stages::sweep(&ctx)?;
            let failed = t.rows.iter().filter(|r| !r.ok).count();
            println!("sweep: {} points, {} failed", t.rows.len(), failed);
        }
    }
    Ok(())
}
