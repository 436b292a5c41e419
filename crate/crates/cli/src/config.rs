//! Run configuration: one JSON file drives the whole pipeline.
//!
//! Unknown fields are rejected everywhere so ablation definitions stay
//! auditable. The canonical serialization (recursively key-sorted JSON) is
//! hashed, and every command works under `output_dir/run-<hash>/`, which
//! makes reruns with an unchanged config cache hits.

use std::path::{Path, PathBuf};

use aeriscast_core::data::{Splits, ToyConfig};
use aeriscast_core::model::ModelConfig;
use aeriscast_core::training::TrainConfig;
use aeriscast_core::{Error, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the dataset comes from: a pre-existing directory or a synthetic
/// spec. Exactly one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub toy: Option<ToySpec>,
}

/// Synthetic dataset spec: grid, split sizes, start time, and the generator
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub start_time: DateTime<Utc>,
    pub config: ToyConfig,
}

impl ToySpec {
    pub fn splits(&self) -> Splits {
        Splits::contiguous(self.n_train, self.n_val, self.n_test)
    }
}

fn default_n_inits() -> usize {
    11
}

fn default_lead_days() -> usize {
    7
}

fn default_ensemble_size() -> usize {
    9
}

fn default_report_leads() -> Vec<i64> {
    vec![48, 96, 168]
}

/// Evaluation block: init-time sampling, lead horizon, channels to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evenly spaced initial conditions in the test split.
    #[serde(default = "default_n_inits")]
    pub n_inits: usize,
    #[serde(default = "default_lead_days")]
    pub lead_days: usize,
    pub channels: Vec<String>,
    /// Lagged-ensemble member count; 0 disables ensemble scoring.
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Lead times (hours) reported in tables.
    #[serde(default = "default_report_leads")]
    pub report_lead_hours: Vec<i64>,
    #[serde(default)]
    pub fair_crps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fine-tuning settings per unroll length; derived from `train` when
    /// absent (a tenth of the learning rate, a quarter of the epochs,
    /// activation recomputation on).
    #[serde(default)]
    pub finetune4: Option<TrainConfig>,
    #[serde(default)]
    pub finetune8: Option<TrainConfig>,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.toy) {
            (None, None) => {
                return Err(Error::invalid(
                    "data: either `path` or `toy` must be set",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "data: `path` and `toy` are mutually exclusive",
                ))
            }
            _ => {}
        }
        if let Some(toy) = &self.data.toy {
            toy.config.validate()?;
            if toy.config.n_times != toy.n_train + toy.n_val + toy.n_test {
                return Err(Error::invalid(format!(
                    "data.toy: n_times {} != n_train + n_val + n_test = {}",
                    toy.config.n_times,
                    toy.n_train + toy.n_val + toy.n_test
                )));
            }
        }
        self.train.validate()?;
        for (name, ft) in [("finetune4", &self.finetune4), ("finetune8", &self.finetune8)] {
            if let Some(cfg) = ft {
                cfg.validate()?;
                let expect = if name == "finetune4" { 4 } else { 8 };
                if cfg.n_steps != expect {
                    return Err(Error::invalid(format!(
                        "{name}: n_steps must be {expect}, got {}",
                        cfg.n_steps
                    )));
                }
            }
        }
        if self.evaluation.n_inits == 0 {
            return Err(Error::invalid("evaluation.n_inits must be positive"));
        }
        if self.evaluation.lead_days == 0 {
            return Err(Error::invalid("evaluation.lead_days must be positive"));
        }
        if self.evaluation.channels.is_empty() {
            return Err(Error::invalid("evaluation.channels must not be empty"));
        }
        Ok(())
    }

    /// Derived fine-tune settings for 4- or 8-step unrolls.
    pub fn finetune_cfg(&self, n_steps: usize) -> TrainConfig {
        let explicit = match n_steps {
            4 => &self.finetune4,
            8 => &self.finetune8,
            _ => &None,
        };
        if let Some(cfg) = explicit {
            return cfg.clone();
        }
        TrainConfig {
            learning_rate: self.train.learning_rate * 0.1,
            epochs: (self.train.epochs / 4).max(1),
            n_steps,
            recompute_activations: true,
            ..self.train.clone()
        }
    }
}

/// Applies one `--set key=value` override to a JSON tree. Keys use dotted
/// paths (`train.learning_rate=5e-4`); values parse as JSON first, falling
/// back to a plain string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("--set {spec:?}: expected key=value")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::invalid(format!("--set {path}: {} is not an object", parts[..i].join(".")))
        })?;
        if i == parts.len() - 1 {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split produces at least one part")
}

/// Serializes a JSON tree with all object keys sorted, so the hash is
/// independent of field order in the source file.
fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}

/// A parsed, validated config plus its provenance hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub hash: String,
    pub canonical: String,
}

impl LoadedConfig {
    pub fn run_dir(&self) -> PathBuf {
        self.config.output_dir.join(format!("run-{}", self.hash))
    }
}

/// Reads and validates `path`, applying `--set` overrides before hashing.
pub fn load_config(path: &Path, sets: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path: path.into() }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.into(),
            reason: e.to_string(),
        })?;
    for spec in sets {
        apply_override(&mut value, spec)?;
    }
    let config: RunConfig =
        serde_json::from_value(value.clone()).map_err(|e| Error::invalid(format!(
            "config {}: {e}",
            path.display()
        )))?;
    config.validate()?;
    let canonical = canonical_json(&value);
    let digest = Sha256::digest(canonical.as_bytes());
    let hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(LoadedConfig {
        config,
        hash,
        canonical,
    })
}
