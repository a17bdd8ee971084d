//! Declarative run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kacl_core::artifact::json_hash;
use kacl_core::eval::DEFAULT_LOC_THRESHOLDS;
use kacl_core::synth::{self, Dataset, DatasetSpec};
use kacl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("run"),
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Either a generated dataset on disk or a spec synthesized in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub path: Option<PathBuf>,
    pub spec: Option<DatasetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub loc_thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { loc_thresholds: DEFAULT_LOC_THRESHOLDS.to_vec() }
    }
}

/// The hashed part of a run: everything that influences results, minus
/// where they are written.
#[derive(Serialize)]
struct Hashed<'a> {
    dataset: &'a DatasetSource,
    train: &'a TrainConfig,
    eval: &'a EvalOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = &cfg.dataset.path {
            cfg.dataset.path = Some(base.join(p));
        }
        if cfg.dataset.path.is_some() && cfg.dataset.spec.is_some() {
            return Err(UsageError("config sets both dataset.path and dataset.spec".into()).into());
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        json_hash(&Hashed { dataset: &self.dataset, train: &self.train, eval: &self.eval })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.dataset.path, &self.dataset.spec) {
            (Some(p), _) => Ok(synth::load(p)?),
            (None, Some(spec)) => Ok(synth::synthesize(spec)?),
            (None, None) => Ok(synth::synthesize(&DatasetSpec::default())?),
        }
    }
}

/// Reads a dataset spec from TOML or JSON (by extension); missing fields
/// take their defaults.
pub fn load_spec(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: DatasetSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("spec {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| UsageError(format!("spec {}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

/// `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_thresholds(s: &str) -> std::result::Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, step] = parts[..] else {
            return Err(format!("expected start:end:step, got {s:?}"));
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || b < a {
            return Err(format!("empty or unbounded threshold range {s:?}"));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // round to kill accumulated float noise like 0.30000000000000004
        Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
    } else {
        s.split(',').map(num).collect()
    }
}
