use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Stem};
use crate::erase::ErasureConfig;
use crate::error::{Error, Result};
use crate::flowdensity::FlowConfig;
use crate::objectives::ClStrategy;
use crate::taskstream::{DatasetId, SplitOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only `adam` is implemented.
    pub algorithm: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub flow_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: "adam".into(),
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 20,
            flow_learning_rate: 1e-3,
        }
    }
}

/// Which tasks receive label noise and at what rate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub rate: f64,
    /// 1-based task ids; `None` applies noise to every task.
    #[serde(default)]
    pub tasks: Option<Vec<usize>>,
    /// Explicit per-task mappings replacing the default similar-class mapping.
    #[serde(default)]
    pub mappings: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl NoiseSchedule {
    pub fn applies_to(&self, task_id: usize) -> bool {
        self.rate > 0.0 && self.tasks.as_ref().is_none_or(|t| t.contains(&task_id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    PerBatch,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraserConfig {
    pub enabled: bool,
    pub percentile: f64,
    #[serde(default)]
    pub per_class: bool,
    /// Generative replay of old-task features in the flow objective.
    pub flow_replay: bool,
    /// Density-weighted guidance term in the classifier objective.
    pub guidance: bool,
    /// Guidance sample count; defaults to the batch size.
    #[serde(default)]
    pub guidance_samples: Option<usize>,
    pub var_floor: f64,
    pub alternation: Alternation,
    /// Run erasure after identification.
    pub erase: bool,
}

impl Default for EraserConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            percentile: 0.05,
            per_class: false,
            flow_replay: true,
            guidance: true,
            guidance_samples: None,
            var_floor: crate::objectives::DEFAULT_VAR_FLOOR,
            alternation: Alternation::PerBatch,
            erase: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub num_tasks: usize,
    /// Fixed class order; when absent each run seed derives its own.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
    #[serde(default)]
    pub split: SplitOptions,
    #[serde(default)]
    pub noise: NoiseSchedule,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub cl: ClStrategy,
    /// Importance `Ω_k` given to every anchored task.
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub eraser: EraserConfig,
    #[serde(default)]
    pub erasure: ErasureConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_omega() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Desk-scale split-MNIST defaults with EWC.
    pub fn mnist_default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            data_dir: default_data_dir(),
            num_tasks: 5,
            class_order_seed: None,
            split: SplitOptions::default(),
            noise: NoiseSchedule::default(),
            backbone: BackboneConfig::default(),
            flow: FlowConfig::default(),
            optimizer: OptimizerConfig::default(),
            cl: ClStrategy::Ewc {
                lambda: 1.0,
                fisher: false,
            },
            omega: 1.0,
            eraser: EraserConfig::default(),
            erasure: ErasureConfig::default(),
            seeds: vec![0],
            output_dir: default_output_dir(),
            checkpoints: true,
        }
    }

    /// Dense-stem defaults for the 2-D Gaussian-blob dataset.
    pub fn synthetic_default() -> Self {
        Self {
            dataset: DatasetId::Synthetic2d,
            num_tasks: 2,
            backbone: BackboneConfig {
                stem: Stem::Dense { hidden: 32 },
                feature_dim: 2,
                shared_width: 16,
            },
            optimizer: OptimizerConfig {
                batch_size: 64,
                epochs: 10,
                ..OptimizerConfig::default()
            },
            ..Self::mnist_default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key.sub=value` overrides. Values parse as JSON when possible
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one run seed is required".into());
        }
        if self.optimizer.algorithm != "adam" {
            return bad(format!("unsupported optimizer `{}`", self.optimizer.algorithm));
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || o.epochs == 0 || [o.learning_rate, o.flow_learning_rate].iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
            return bad("optimizer batch size, epochs and learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return bad(format!("noise rate {} outside [0, 1]", self.noise.rate));
        }
        if self.eraser.enabled && !(self.eraser.percentile > 0.0 && self.eraser.percentile < 0.5) {
            return bad(format!("percentile {} outside (0, 0.5)", self.eraser.percentile));
        }
        if self.eraser.enabled && self.eraser.erase && self.erasure.epochs == 0 {
            return bad("erasure.epochs must be at least 1".into());
        }
        if self.omega < 0.0 {
            return bad("omega must be non-negative".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with run seeds and output location removed.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(m) = &mut v {
            m.remove("seeds");
            m.remove("output_dir");
            m.remove("checkpoints");
        }
        let digest = Sha256::digest(canonical(&v).as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::Config(format!("`{key}`: `{part}` is not inside an object"))),
        };
        if last {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
