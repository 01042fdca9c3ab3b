//! Stage manifests, artifact writing and the output-directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".acsa-forge.lock";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Everything needed to re-run a stage: the portable config, the seed and
/// digests of what went in and came out. Paths are relative to the output
/// directory; external inputs are keyed by config field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects inputs and outputs for one stage directory.
pub struct StageWriter {
    root: PathBuf,
    stage: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl StageWriter {
    pub fn new(root: &Path, stage: &'static str) -> Result<Self> {
        let dir = root.join(stage);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            stage,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.stage)
    }

    /// Records an input produced by an earlier stage (`relative` to the root).
    pub fn input(&mut self, relative: &str) -> Result<()> {
        let digest = sha256_file(&self.root.join(relative))?;
        self.inputs.insert(relative.to_string(), digest);
        Ok(())
    }

    /// Records an input from outside the output directory under `key`.
    pub fn external_input(&mut self, key: &str, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(key.to_string(), digest);
        Ok(())
    }

    /// Path for an output file, registered for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir().join(name)
    }

    pub fn finish(self, config: &PipelineConfig) -> Result<Manifest> {
        let dir = self.dir();
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            let digest = sha256_file(&dir.join(name))?;
            outputs.insert(format!("{}/{name}", self.stage), digest);
        }
        let manifest = Manifest {
            stage: self.stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            config: config.portable_view(),
            inputs: self.inputs,
            outputs,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                writeln!(file, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                bail!(
                    "{} is locked by process {}; if no command is running there, delete {}",
                    root.display(),
                    owner.trim(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fails with a hint when a stage input is missing.
pub fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        bail!("missing input {}; {hint}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).unwrap_err();
        assert!(err.to_string().contains("locked"));
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_records_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default();
        let mut stage = StageWriter::new(dir.path(), "ingest").unwrap();
        let out = stage.output("a.json");
        write_json(&out, &serde_json::json!({"x": 1})).unwrap();
        let manifest = stage.finish(&config).unwrap();
        assert_eq!(manifest.outputs.keys().collect::<Vec<_>>(), ["ingest/a.json"]);
        assert_eq!(manifest.outputs["ingest/a.json"], sha256_file(&out).unwrap());
        let back: Manifest = read_json(&dir.path().join("ingest").join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
    }
}
