//! Run configuration: a flat dotted-key text format with canonical ordering,
//! whose hash identifies a run.

use crate::dataset::DatasetSpec;
use crate::ddpl::{AttackMode, DDPLConfig};
use crate::error::{Error, Result};
use crate::ldm::ModelVersion;
use crate::personalization::FinetuneConfig;
use crate::tensor::Real;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Everything a reproducible run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub ddpl: DDPLConfig,
    pub attack: AttackMode,
    pub use_mask: bool,
    pub tau: Real,
    pub mask_inversion_steps: usize,
    pub mask_finetune_multiplier: usize,
    /// Identifier bound during protection / fine-tuning.
    pub train_identifier: String,
    /// Identifier used at evaluation time ("t@t" for the prompt-mismatch study).
    pub eval_identifier: String,
    /// Model version used to craft perturbations.
    pub protect_version: ModelVersion,
    /// Model version fine-tuned at evaluation time (vB for the mismatch study).
    pub eval_version: ModelVersion,
    pub finetune_lr: Real,
    pub finetune_batch: usize,
    pub eval_finetune_steps: usize,
    pub eval_samples: usize,
    pub eval_ddim_steps: usize,
    pub classifier_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            ddpl: DDPLConfig::default(),
            attack: AttackMode::Ddap,
            use_mask: true,
            tau: 0.35,
            mask_inversion_steps: 10,
            mask_finetune_multiplier: 5,
            train_identifier: "sks".to_string(),
            eval_identifier: "sks".to_string(),
            protect_version: ModelVersion::VA,
            eval_version: ModelVersion::VA,
            finetune_lr: 1e-4,
            finetune_batch: 2,
            eval_finetune_steps: 200,
            eval_samples: 16,
            eval_ddim_steps: 20,
            classifier_steps: 500,
        }
    }
}

impl RunConfig {
    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            prompt: format!("a photo of {} subject", self.train_identifier),
            lr: self.finetune_lr,
            batch_size: self.finetune_batch,
            steps: self.eval_finetune_steps,
            ..Default::default()
        }
    }

    pub fn protect_options(&self) -> crate::ddpl::ProtectOptions {
        crate::ddpl::ProtectOptions {
            ddpl: self.ddpl.clone(),
            attack: self.attack,
            use_mask: self.use_mask,
            tau: self.tau,
            mask_inversion_steps: self.mask_inversion_steps,
            mask_finetune_multiplier: self.mask_finetune_multiplier,
            finetune: self.finetune_config(),
        }
    }

    /// Canonical flat text: one sorted `key = value` line per scalar.
    pub fn to_canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parse the flat text form (as produced by [`Self::to_canonical_text`]).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut flat = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} has no '=': {line}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            let val: Value = serde_json::from_str(v.trim())
                .map_err(|e| Error::Config(format!("config value for {key}: {e}")))?;
            flat.insert(key, val);
        }
        let tree = unflatten(&flat)?;
        Ok(serde_json::from_value(tree)?)
    }

    /// Apply a dotted-key override, e.g. `("ddpl.epochs", "10")`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let parsed: Value = serde_json::from_str(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        set_path(&mut tree, key, parsed)?;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    /// Hex digest identifying the run.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), child, out);
            }
        }
        scalar => {
            out.insert(prefix.to_string(), scalar.to_string());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Value::Object(serde_json::Map::new());
    for (key, val) in flat {
        set_path(&mut root, key, val.clone())?;
    }
    Ok(root)
}

fn set_path(tree: &mut Value, path: &str, val: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = tree;
    for (i, part) in parts.iter().enumerate() {
        let last = i == parts.len() - 1;
        if let Ok(idx) = part.parse::<usize>() {
            if !cur.is_array() {
                *cur = Value::Array(Vec::new());
            }
            let arr = cur.as_array_mut().unwrap();
            while arr.len() <= idx {
                arr.push(Value::Null);
            }
            if last {
                arr[idx] = val;
                return Ok(());
            }
            cur = &mut arr[idx];
            if cur.is_null() {
                *cur = Value::Object(serde_json::Map::new());
            }
        } else {
            if !cur.is_object() {
                *cur = Value::Object(serde_json::Map::new());
            }
            let obj = cur.as_object_mut().unwrap();
            if last {
                obj.insert(part.to_string(), val);
                return Ok(());
            }
            cur = obj
                .entry(part.to_string())
                .or_insert(Value::Object(serde_json::Map::new()));
        }
    }
    Err(Error::Config(format!("empty config path '{path}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back.to_canonical_text(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.ddpl.epochs = 49;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn overrides_apply_to_nested_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("ddpl.epochs", "7").unwrap();
        assert_eq!(cfg.ddpl.epochs, 7);
        cfg.apply_override("eval_identifier", "\"t@t\"").unwrap();
        assert_eq!(cfg.eval_identifier, "t@t");
        // unquoted strings are accepted too
        cfg.apply_override("attack", "\"Spl\"").unwrap();
        assert_eq!(cfg.attack, AttackMode::Spl);
        assert!(cfg.apply_override("ddpl.epochs", "\"x\"").is_err());
    }

    #[test]
    fn canonical_text_is_sorted_and_flat() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_text();
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted, "keys must be canonically ordered");
        assert!(text.contains("dataset.placement.cx.0 = 0.38"));
        assert!(text.contains("attack = \"Ddap\""));
    }
}
