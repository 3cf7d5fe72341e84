//! Run configuration: dataset, model and optimizer parameters, loaded
//! from JSON with dotted-key overrides. Unknown keys are rejected.

use crate::graph::{
    generate_sbm_cluster, generate_tree_neighbour_match, load_split_dir, DatasetSplit, GraphError,
    DEFAULT_SPLIT,
};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override {key}: {message}")]
    BadOverride { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Tree,
    Sbm,
    Dir,
}

/// Dataset selection: a synthetic generator or a directory of JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Tree depth (binary-tree benchmark).
    #[serde(default = "default_depth")]
    pub r: usize,
    /// Graphs to generate.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_nodes_per_cluster")]
    pub nodes_per_cluster: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_p_in")]
    pub p_in: f64,
    #[serde(default = "default_p_out")]
    pub p_out: f64,
    /// Train/valid/test fractions for generated data.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Dataset directory when `kind` is `dir`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_depth() -> usize {
    3
}
fn default_count() -> usize {
    1000
}
fn default_nodes_per_cluster() -> usize {
    20
}
fn default_clusters() -> usize {
    6
}
fn default_p_in() -> f64 {
    0.55
}
fn default_p_out() -> f64 {
    0.25
}
fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

impl DataConfig {
    pub fn tree(r: usize, count: usize) -> Self {
        Self {
            kind: DataKind::Tree,
            r,
            count,
            nodes_per_cluster: default_nodes_per_cluster(),
            clusters: default_clusters(),
            p_in: default_p_in(),
            p_out: default_p_out(),
            split: default_split(),
            dir: None,
        }
    }

    pub fn sbm(nodes_per_cluster: usize, clusters: usize, count: usize) -> Self {
        Self {
            kind: DataKind::Sbm,
            r: default_depth(),
            count,
            nodes_per_cluster,
            clusters,
            p_in: default_p_in(),
            p_out: default_p_out(),
            split: default_split(),
            dir: None,
        }
    }

    pub fn build(&self, seed: u64) -> Result<DatasetSplit, GraphError> {
        match self.kind {
            DataKind::Tree => generate_tree_neighbour_match(self.r, self.count, seed, self.split),
            DataKind::Sbm => generate_sbm_cluster(
                self.nodes_per_cluster,
                self.clusters,
                self.p_in,
                self.p_out,
                seed,
                self.count,
                self.split,
            ),
            DataKind::Dir => {
                let dir = self.dir.as_ref().ok_or_else(|| {
                    GraphError::InvalidParams("data.kind = dir requires data.dir".into())
                })?;
                load_split_dir(dir)
            }
        }
    }
}

/// Optimizer and loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stop once the running train-set metric reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_train_metric: Option<f64>,
}

fn default_warmup() -> usize {
    5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: default_warmup(),
            base_lr: default_lr(),
            weight_decay: 0.0,
            batch_size: default_batch(),
            early_stop_train_metric: None,
        }
    }
}

/// One complete, reproducible run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.epochs == 0 {
            return Err(ConfigError::Invalid("train.epochs must be positive".into()));
        }
        if self.train.warmup_epochs >= self.train.epochs {
            return Err(ConfigError::Invalid(format!(
                "warmup_epochs {} must be below epochs {}",
                self.train.warmup_epochs, self.train.epochs
            )));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("train.batch_size must be positive".into()));
        }
        if !(self.train.base_lr.is_finite() && self.train.base_lr > 0.0) {
            return Err(ConfigError::Invalid("train.base_lr must be positive".into()));
        }
        let s = self.data.split;
        if s.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s[0] + s[1] + s[2] - 1.0).abs() > 1e-9
        {
            return Err(ConfigError::Invalid(format!(
                "data.split must be fractions summing to 1, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Loads a JSON run config, applies dotted-key overrides, validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path)?;
        let mut value: serde_json::Value = serde_json::from_slice(&bytes)?;
        apply_overrides(&mut value, overrides)?;
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `key.path=value` overrides onto a JSON document. Values parse
/// as JSON when possible and fall back to strings, so `--set
/// model.mpnn=gcn` and `--set train.base_lr=0.01` both work.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[(String, String)],
) -> Result<(), ConfigError> {
    for (key, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split never yields empty");
        let mut cursor = &mut *value;
        for (i, part) in parents.iter().enumerate() {
            let map = cursor.as_object_mut().ok_or_else(|| ConfigError::BadOverride {
                key: key.clone(),
                message: format!("{} is not an object", parts[..i].join(".")),
            })?;
            cursor = map
                .entry((*part).to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        let map = cursor.as_object_mut().ok_or_else(|| ConfigError::BadOverride {
            key: key.clone(),
            message: format!("{} is not an object", parents.join(".")),
        })?;
        map.insert((*last).to_string(), parsed);
    }
    Ok(())
}
