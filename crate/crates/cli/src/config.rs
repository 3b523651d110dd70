//! Run configuration: JSON file, dotted overrides, strict keys.

use std::path::{Path, PathBuf};

use modelab_core::data::GenParams;
use modelab_core::metrics::EvalConfig;
use modelab_core::model::ModelConfig;
use modelab_core::training::TrainConfig;
use modelab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Shapes,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub count: usize,
    pub seed: u64,
    pub gen: GenParams,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Shapes,
            count: 100,
            seed: 0,
            gen: GenParams::default(),
            mnist_images: None,
            mnist_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_store: Option<PathBuf>,
    pub val_store: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_store: None,
            val_store: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown key `{}`", parts[..=i].join("."))))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then each `--set`, then the seed flag.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>, deterministic: bool) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, over);
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.data.seed = s;
        }
        cfg.deterministic |= deterministic;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
