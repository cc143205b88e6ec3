//! Application configuration: one JSON document covering phantom
//! generation and training, with dotted-path overrides for the CLI.
//!
//! Unknown keys are rejected everywhere — file loads name the offending
//! field and the valid alternatives (serde's unknown-field error), and
//! dotted overrides list the keys available at the failing level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Cases generated by the `phantom` subcommand.
    pub cases: usize,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig { cases: 20, phantom: PhantomSpec::default(), train: TrainConfig::default() }
    }
}

impl AppConfig {
    /// Desk-scale preset: everything sized to run on one CPU core.
    pub fn desk() -> Self {
        AppConfig::default()
    }

    /// Publication-scale preset (model shape only; not runnable at desk
    /// scale, but parameter counts and plans are).
    pub fn paper() -> Self {
        let mut cfg = AppConfig::default();
        cfg.train.model = crate::model::ModelConfig::paper();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 {
            return Err(Error::Config("cases must be positive".into()));
        }
        self.phantom.validate()?;
        self.train.validate()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads a JSON config file; unknown fields are rejected with the list of
/// expected ones.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Splits one `key=value` argument at the first '='.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::Config(format!("--set expects key=value, got {arg:?}"))),
    }
}

/// Applies dotted-path overrides (`train.learning_rate=0.01`). Values parse
/// as JSON when possible (numbers, arrays, objects, booleans) and fall back
/// to plain strings, so enum variants read naturally
/// (`train.loss.kind=focal_dice`). Tagged-enum fields are replaced
/// wholesale with a JSON object.
pub fn apply_overrides(cfg: &AppConfig, sets: &[(String, String)]) -> Result<AppConfig> {
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    for (key, raw) in sets {
        let value: serde_json::Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(raw.clone()),
        };
        set_path(&mut root, key, value)?;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid override: {e}")))
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config key {:?} is not a section and has no sub-key {part:?}",
                parts[..i].join(".")
            ))
        })?;
        if !obj.contains_key(*part) {
            let mut valid: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
            valid.sort();
            return Err(Error::Config(format!(
                "unknown config key {:?} in {:?}; valid keys: {}",
                part,
                if i == 0 { "<root>".to_string() } else { parts[..i].join(".") },
                valid.join(", ")
            )));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("paths have at least one part")
}
