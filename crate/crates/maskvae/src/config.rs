//! Training configuration resolution: built-in defaults, then a JSON file,
//! then command-line flags.

use std::path::Path;

use maskvae_core::vae::TrainConfig;
use serde_json::Value;

use crate::error::{Error, Result};

/// Values given on the command line; `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub hypothesis: Option<u8>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub kl_weight: Option<f64>,
    pub resolution: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.hypothesis {
            cfg.hypothesis = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.steps_per_epoch {
            cfg.steps_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.kl_weight {
            cfg.kl_weight = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
    }
}

/// Merges a JSON object over the defaults. Unknown keys are rejected so a
/// misspelled field cannot silently fall back to its default.
pub fn merge_json(base: TrainConfig, layer: &str) -> Result<TrainConfig> {
    let layer: Value = serde_json::from_str(layer).map_err(|e| Error::Usage(format!("config file: {e}")))?;
    let Value::Object(layer) = layer else {
        return Err(Error::Usage("config file must hold a JSON object".into()));
    };
    let Value::Object(mut merged) = serde_json::to_value(base).expect("config serializes") else {
        unreachable!("TrainConfig serializes to an object")
    };
    for (key, value) in layer {
        if !merged.contains_key(&key) {
            let known: Vec<_> = merged.keys().cloned().collect();
            return Err(Error::Usage(format!("config file: unknown key '{key}' (known: {})", known.join(", "))));
        }
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Usage(format!("config file: {e}")))
}

/// Defaults, overlaid by `file` (if any), overlaid by `flags`; the result is
/// validated.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        cfg = merge_json(cfg, &text)?;
    }
    flags.apply(&mut cfg);
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn to_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 3, "batch_size": 8, "seed": 5}"#).unwrap();
        let flags = Overrides { seed: Some(9), ..Default::default() };
        let cfg = resolve(Some(&path), &flags).unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.seed), (3, 8, 9));
        assert_eq!(cfg.steps_per_epoch, TrainConfig::default().steps_per_epoch);
        assert_eq!(resolve(None, &Overrides::default()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        assert!(matches!(merge_json(TrainConfig::default(), r#"{"epoch": 3}"#), Err(Error::Usage(_))));
        assert!(matches!(merge_json(TrainConfig::default(), "[1]"), Err(Error::Usage(_))));
        let flags = Overrides { hypothesis: Some(11), ..Default::default() };
        assert_eq!(resolve(None, &flags).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn echoed_config_reloads() {
        let cfg = TrainConfig { epochs: 2, kl_weight: 0.5, ..TrainConfig::default() };
        assert_eq!(merge_json(TrainConfig::default(), &to_json(&cfg)).unwrap(), cfg);
    }
}
