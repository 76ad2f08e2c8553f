use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use volseg::dataset::PhantomGroup;
use volseg::{DomainTag, EvalConfig, ModalityTransform, ModelConfig, TrainConfig};

use crate::UserError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Phantoms generated in memory (or written by `synth`).
    #[serde(default)]
    pub phantoms: Vec<PhantomGroup>,
    /// A directory with `manifest.json`; takes precedence over `phantoms`.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default = "default_train_domains")]
    pub train_domains: Vec<DomainTag>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub modalities: ModalityTransform,
}

fn default_train_domains() -> Vec<DomainTag> {
    vec![DomainTag::Adult]
}

fn default_holdout() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phantoms: Vec::new(),
            dataset_dir: None,
            train_domains: default_train_domains(),
            holdout_fraction: default_holdout(),
            split_seed: 0,
            modalities: ModalityTransform::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: default_host(),
            port: default_port(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `a.b=c` overrides,
    /// then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, UserError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UserError(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| UserError(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| UserError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UserError> {
        let wrap = |e: volseg::Error| UserError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        for g in &self.data.phantoms {
            g.spec.validate().map_err(wrap)?;
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(UserError(format!(
                "data.holdout_fraction {} outside [0, 1)",
                self.data.holdout_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(UserError(format!("eval.threshold {} outside [0, 1]", self.eval.threshold)));
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
/// Numeric segments index arrays.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), UserError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| UserError(format!("override {spec:?} is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(UserError(format!("override {spec:?} has an empty key")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| UserError(format!("override {spec:?}: {key:?} indexes an array")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| UserError(format!("override {spec:?}: index {idx} out of range")))?
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap().entry(*key).or_insert(Value::Null)
            }
            Value::Object(map) => map.entry(*key).or_insert(Value::Null),
            _ => return Err(UserError(format!("override {spec:?}: {key:?} is below a scalar"))),
        };
        if last {
            *node = value;
            return Ok(());
        }
    }
    Ok(())
}
