//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`ModelConfig`] and [`TrainConfig`]. Blank
//! lines and lines starting with `#` are ignored. `vocab_size` is taken from
//! the data and cannot be set.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale model and training defaults. `vocab_size` is a
    /// placeholder until the vocabulary is known.
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `key` on `target` if it names one of its fields.
fn try_set<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<bool> {
    let mut obj = serde_json::to_value(&*target)?;
    let Some(slot) = obj.get_mut(key) else {
        return Ok(false);
    };
    *slot = parse_value(raw);
    *target = serde_json::from_value(obj).map_err(|e| Error::Config(format!("{key} = {raw}: {e}")))?;
    Ok(true)
}

impl RunConfig {
    /// Override one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "vocab_size" {
            return Err(Error::Config("vocab_size is taken from the data".into()));
        }
        if try_set(&mut self.model, key, value)? || try_set(&mut self.train, key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Apply every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Render as `key = value` lines that [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for v in [serde_json::to_value(&self.model)?, serde_json::to_value(&self.train)?] {
            for (k, v) in v.as_object().expect("struct serialises to an object") {
                if k == "vocab_size" {
                    continue;
                }
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    #[test]
    fn overrides_both_sections() {
        let cfg = RunConfig::from_text("# desk run\nhidden_size = 32\n\nablation = no_ul\nalpha=0.5\n").unwrap();
        assert_eq!(cfg.model.hidden_size, 32);
        assert_eq!(cfg.model.ablation, Ablation::NoUl);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.train.beta, TrainConfig::default().beta);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::from_text("num_layers = 1\nwidth = 3").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("width"), "{err}");
    }

    #[test]
    fn bad_value_rejected() {
        assert!(RunConfig::from_text("num_layers = many").is_err());
        assert!(RunConfig::from_text("vocab_size = 10").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("d2_causal", "true").unwrap();
        cfg.set("lr", "0.0002").unwrap();
        let back = RunConfig::from_text(&cfg.to_text().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
