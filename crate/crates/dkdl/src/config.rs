//! Pipeline configuration with flat dotted keys.
//!
//! Values come from built-in defaults, then an optional JSON file, then
//! `key=value` overrides, later sources winning. The file may be nested
//! (`{"dkd": {"alpha": 2}}`) or flat (`{"dkd.alpha": 2}`).

use std::collections::BTreeMap;
use std::path::Path;

use dkdl_core::distill::{DkdConfig, GammaMode};
use dkdl_core::model::{LoraSettings, PoolKind};
use dkdl_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `max` or `avg`.
    pub pooling: String,
    pub epochs: Epochs,
    pub dkd: DkdSection,
    pub lora: LoraSection,
    pub adam: AdamSection,
    pub data: DataSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Epochs {
    pub teacher: usize,
    pub distill: usize,
    pub finetune: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DkdSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub learnable_gamma: bool,
    pub t2_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub sigma: f64,
    /// Enables the `alpha / rank` update scaling when set.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub per_class: usize,
    pub split_ratio: f64,
    pub window_raw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub samples: usize,
    pub warmup: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 0.005,
            weight_decay: 1e-4,
            batch_size: 64,
            pooling: "max".into(),
            epochs: Epochs::default(),
            dkd: DkdSection::default(),
            lora: LoraSection::default(),
            adam: AdamSection::default(),
            data: DataSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Default for Epochs {
    fn default() -> Self {
        Self { teacher: 50, distill: 50, finetune: 20 }
    }
}

impl Default for DkdSection {
    fn default() -> Self {
        let d = DkdConfig::default();
        Self {
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            temperature: d.temperature,
            learnable_gamma: false,
            t2_scale: d.t2_scale,
        }
    }
}

impl Default for LoraSection {
    fn default() -> Self {
        let d = LoraSettings::default();
        Self { rank: d.rank, sigma: d.sigma, alpha: d.alpha }
    }
}

impl Default for AdamSection {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self { beta1: d.beta1, beta2: d.beta2, eps: d.eps, decoupled_decay: d.decoupled_decay }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { per_class: 280, split_ratio: 0.8, window_raw: 2048 }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { samples: 2500, warmup: 100 }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::Config(format!("`{key}` is a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl Config {
    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Config = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its value, in dotted form.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &self.to_value(), &mut out);
        out
    }

    /// Dotted keys as checkpoint metadata (`config.` prefix).
    pub fn metadata(&self) -> BTreeMap<String, String> {
        self.flat().into_iter().map(|(k, v)| (format!("config.{k}"), v.to_string())).collect()
    }

    /// `key = default` lines for help text.
    pub fn help_listing() -> String {
        let mut s = String::from("Config keys (set with --set key=value or a --config JSON file):\n");
        for (k, v) in Config::default().flat() {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        s
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = self.to_value();
        for o in overrides {
            let o = o.as_ref();
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut v, k.trim(), parse_value(raw.trim()))?;
        }
        Self::from_value(v)
    }

    pub fn with_file(&self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: Map<String, Value> = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        let mut flat = BTreeMap::new();
        flatten_into("", &Value::Object(file), &mut flat);
        let mut v = self.to_value();
        for (k, val) in flat {
            set_path(&mut v, &k, val)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.pooling != "max" && self.pooling != "avg" {
            return bad("pooling must be `max` or `avg`");
        }
        if self.lora.rank == 0 {
            return bad("lora.rank must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.data.split_ratio) {
            return bad("data.split_ratio must lie in [0, 1]");
        }
        if self.data.per_class == 0 {
            return bad("data.per_class must be at least 1");
        }
        if self.data.window_raw != 2 * dkdl_core::model::INPUT_LEN {
            return bad("data.window_raw must be 2048 (twice the model input length)");
        }
        if self.bench.samples == 0 {
            return bad("bench.samples must be at least 1");
        }
        self.dkd_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pool_kind(&self) -> PoolKind {
        if self.pooling == "avg" {
            PoolKind::Avg
        } else {
            PoolKind::Max
        }
    }

    pub fn dkd_config(&self) -> DkdConfig {
        DkdConfig {
            alpha: self.dkd.alpha,
            beta: self.dkd.beta,
            gamma: self.dkd.gamma,
            temperature: self.dkd.temperature,
            gamma_mode: if self.dkd.learnable_gamma { GammaMode::Learnable } else { GammaMode::Fixed },
            t2_scale: self.dkd.t2_scale,
        }
    }

    pub fn lora_settings(&self) -> LoraSettings {
        LoraSettings { rank: self.lora.rank, sigma: self.lora.sigma, alpha: self.lora.alpha }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            weight_decay: self.weight_decay,
            decoupled_decay: self.adam.decoupled_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = Config::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size), (0.005, 1e-4, 64));
        assert_eq!((c.epochs.teacher, c.epochs.distill, c.epochs.finetune), (50, 50, 20));
        assert_eq!((c.dkd.alpha, c.dkd.beta, c.dkd.gamma), (1.0, 8.0, 0.5));
        assert_eq!((c.lora.rank, c.lora.sigma), (12, 0.01));
        assert_eq!((c.bench.samples, c.bench.warmup), (2500, 100));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = Config::default().with_overrides(&["dkd.alpha=2.5", "epochs.teacher=3", "pooling=avg"]).unwrap();
        assert_eq!(c.dkd.alpha, 2.5);
        assert_eq!(c.epochs.teacher, 3);
        assert_eq!(c.pool_kind(), PoolKind::Avg);
        assert_eq!(c.with_overrides(&["lora.alpha=4"]).unwrap().lora.alpha, Some(4.0));
    }

    #[test]
    fn unknown_or_invalid_keys_are_usage_errors() {
        for bad in ["dkd.alphaa=1", "dkd=1", "lr=-1", "batch_size=0", "novalue"] {
            let e = Config::default().with_overrides(&[bad]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}: {e}");
        }
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"dkd": {"beta": 4}, "lr": 0.01, "epochs.finetune": 7}"#).unwrap();
        let c = Config::default().with_file(&p).unwrap().with_overrides(&["lr=0.02"]).unwrap();
        assert_eq!((c.dkd.beta, c.lr, c.epochs.finetune), (4.0, 0.02, 7));
    }

    #[test]
    fn help_lists_every_key() {
        let h = Config::help_listing();
        for k in Config::default().flat().keys() {
            assert!(h.contains(k.as_str()), "{k}");
        }
        assert!(h.contains("dkd.beta = 8.0"));
    }
}
