//! Pipeline configuration.
//!
//! Values are layered: built-in defaults, then the TOML file given with
//! `--config`, then command-line overrides. Relative paths in the file are
//! taken relative to the file; relative paths on the command line are taken
//! relative to the working directory. A `[preset]` only supplies `alpha`
//! when no layer sets `train.alpha`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use acsa_forge_core::augment::{
    GenerationConfig, PromptTemplate, DEFAULT_PAIR_FORMAT, DEFAULT_PAIR_SEPARATOR, DEFAULT_TEMPLATE,
};
use acsa_forge_core::filter::DEFAULT_TAU;
use acsa_forge_core::registry::ProviderSettings;
use acsa_forge_core::trainer::{alpha_preset, Benchmark, Task, TrainConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Sweep grids used when the config does not name any.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_TAU_GRID: [f64; 4] = [0.0, 0.6, 0.7, 0.8];

/// Keys whose values are filesystem paths.
const PATH_KEYS: [&str; 4] = ["out", "data.train", "data.test", "augment.template_file"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub preset: Option<PresetConfig>,
    pub augment: AugmentConfig,
    pub filter: FilterConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("acsa-forge-out"),
            data: DataConfig::default(),
            preset: None,
            augment: AugmentConfig::default(),
            filter: FilterConfig::default(),
            train: TrainSection::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// SemEval XML or JSONL.
    pub train: Option<PathBuf>,
    /// When absent, a seeded `test_fraction` of `train` is held out.
    pub test: Option<PathBuf>,
    pub test_fraction: f64,
    /// Skip malformed XML records instead of failing.
    pub lenient: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            test_fraction: 0.2,
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub benchmark: Benchmark,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Registered generation backend name.
    pub backend: String,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub n_per_sentence: usize,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    /// Inline template; mutually exclusive with `template_file`.
    pub template: Option<String>,
    pub template_file: Option<PathBuf>,
    pub pair_format: String,
    pub pair_separator: String,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            backend: "mock".into(),
            endpoint: None,
            model_name: g.model_name,
            n_per_sentence: g.n_per_sentence,
            temperature: g.temperature,
            max_retries: g.max_retries,
            timeout_secs: g.timeout.as_secs_f64(),
            retry_backoff_ms: g.retry_backoff.as_millis() as u64,
            max_in_flight: g.max_in_flight,
            template: None,
            template_file: None,
            pair_format: DEFAULT_PAIR_FORMAT.into(),
            pair_separator: DEFAULT_PAIR_SEPARATOR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Registered embedding provider name.
    pub embedder: String,
    pub endpoint: Option<String>,
    pub model: String,
    pub dim: Option<usize>,
    pub tau: f64,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            embedder: "mock".into(),
            endpoint: None,
            model: "text-embedding-3-small".into(),
            dim: None,
            tau: DEFAULT_TAU,
            timeout_secs: 60.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub acd_threshold: f64,
    /// Add the filtered augmented samples to the training set.
    pub use_augmented: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: None,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            feature_dim: t.feature_dim,
            hash_seed: t.hash_seed,
            acd_threshold: t.acd_threshold,
            use_augmented: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHA_GRID.to_vec(),
            taus: DEFAULT_TAU_GRID.to_vec(),
        }
    }
}

/// One `key=value` override. The value is parsed as a TOML value and falls
/// back to a plain string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .with_context(|| format!("override {raw:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override {raw:?} has an empty key");
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .with_context(|| format!("cannot set {key:?}: {part:?} is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn get_path_mut<'a>(table: &'a mut Table, key: &str) -> Option<&'a mut Value> {
    let mut parts = key.split('.').peekable();
    let mut node = table;
    while let Some(part) = parts.next() {
        let value = node.get_mut(part)?;
        if parts.peek().is_none() {
            return Some(value);
        }
        node = value.as_table_mut()?;
    }
    None
}

fn rebase_paths(table: &mut Table, base: &Path, keys: &[&str]) {
    for key in keys {
        if let Some(Value::String(s)) = get_path_mut(table, key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

impl PipelineConfig {
    /// Builds the effective config from an optional file and ordered overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut table: Table = text
                    .parse()
                    .with_context(|| format!("parsing config {}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new("."));
                rebase_paths(&mut table, base, &PATH_KEYS);
                table
            }
            None => Table::new(),
        };
        let cwd = std::env::current_dir().context("reading working directory")?;
        for (key, value) in overrides {
            let mut value = value.clone();
            if PATH_KEYS.contains(&key.as_str()) {
                if let Value::String(s) = &value {
                    if Path::new(s).is_relative() {
                        value = Value::String(cwd.join(s).to_string_lossy().into_owned());
                    }
                }
            }
            set_path(&mut table, key, value)?;
        }
        let mut config: PipelineConfig = table.try_into().context("invalid configuration")?;
        config.inline_template()?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `template_file` into `template` so the effective config is
    /// self-contained.
    fn inline_template(&mut self) -> Result<()> {
        if let Some(path) = self.augment.template_file.take() {
            if self.augment.template.is_some() {
                bail!("augment.template and augment.template_file are mutually exclusive");
            }
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading template {}", path.display()))?;
            self.augment.template = Some(text);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.filter.tau) {
            bail!("filter.tau = {} is outside [0, 1]", self.filter.tau);
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            bail!("data.test_fraction = {} is outside (0, 1)", self.data.test_fraction);
        }
        if !(self.augment.timeout_secs.is_finite() && self.augment.timeout_secs > 0.0) {
            bail!("augment.timeout_secs must be positive");
        }
        if !(self.filter.timeout_secs.is_finite() && self.filter.timeout_secs > 0.0) {
            bail!("filter.timeout_secs must be positive");
        }
        if self.filter.max_in_flight == 0 {
            bail!("filter.max_in_flight must be >= 1");
        }
        self.template()?;
        self.generation_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        let body = self.augment.template.as_deref().unwrap_or(DEFAULT_TEMPLATE);
        Ok(PromptTemplate::new(body, &self.augment.pair_format, &self.augment.pair_separator)?)
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let a = &self.augment;
        GenerationConfig {
            n_per_sentence: a.n_per_sentence,
            temperature: a.temperature,
            max_retries: a.max_retries,
            timeout: Duration::from_secs_f64(a.timeout_secs),
            model_name: a.model_name.clone(),
            seed: self.seed,
            retry_backoff: Duration::from_millis(a.retry_backoff_ms),
            max_in_flight: a.max_in_flight,
        }
    }

    /// `train.alpha` if set, else the preset, else the built-in default.
    pub fn alpha(&self) -> f64 {
        match (self.train.alpha, self.preset) {
            (Some(alpha), _) => alpha,
            (None, Some(p)) => alpha_preset(p.benchmark, p.task),
            (None, None) => TrainConfig::default().alpha,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            alpha: self.alpha(),
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            feature_dim: t.feature_dim,
            hash_seed: t.hash_seed,
            acd_threshold: t.acd_threshold,
        }
    }

    pub fn backend_settings(&self) -> ProviderSettings {
        ProviderSettings {
            endpoint: self.augment.endpoint.clone(),
            model_name: self.augment.model_name.clone(),
            seed: self.seed,
            timeout: Duration::from_secs_f64(self.augment.timeout_secs),
            dim: None,
        }
    }

    pub fn embedder_settings(&self) -> ProviderSettings {
        ProviderSettings {
            endpoint: self.filter.endpoint.clone(),
            model_name: self.filter.model.clone(),
            seed: self.seed,
            timeout: Duration::from_secs_f64(self.filter.timeout_secs),
            dim: self.filter.dim,
        }
    }

    /// The config with machine-specific paths removed. Dataset contents are
    /// tracked by digest in the manifests instead.
    pub fn portable_view(&self) -> serde_json::Value {
        let mut view = self.clone();
        view.out = PathBuf::new();
        view.data.train = None;
        view.data.test = None;
        let mut value = serde_json::to_value(&view).expect("config serializes");
        value["alpha_effective"] = self.alpha().into();
        value
    }

    /// Hex SHA-256 of the portable view.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.portable_view()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
