//! Run configuration: a JSON file merged with command-line overrides, then
//! deserialized into a strict per-command struct (unknown keys rejected, all
//! defaults materialized).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{config_err, CliResult};

pub const SEED_ENV: &str = "UNA_LAB_SEED";

/// Config keys collected from a file and from flags.
#[derive(Debug, Default)]
pub struct Overrides {
    root: Map<String, Value>,
}

impl Overrides {
    pub fn from_file(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("--config {}: {e}", path.display())))?;
        match serde_json::from_str(&text).map_err(|e| config_err(format!("--config {}: {e}", path.display())))? {
            Value::Object(root) => Ok(Self { root }),
            _ => Err(config_err(format!("--config {}: expected a JSON object", path.display()))),
        }
    }

    /// Set `path` (nested keys) when `value` is present.
    pub fn set<T: serde::Serialize>(&mut self, path: &[&str], value: Option<T>) {
        let Some(value) = value else { return };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let (last, parents) = path.split_last().expect("non-empty key path");
        let mut node = &mut self.root;
        for key in parents {
            let entry = node.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().unwrap();
        }
        node.insert(last.to_string(), value);
    }

    /// Load a JSON file into `key` (e.g. a model config given by path).
    pub fn set_file(&mut self, key: &str, path: Option<&Path>, flag: &str) -> CliResult<()> {
        let Some(path) = path else { return Ok(()) };
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{flag} {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{flag} {}: {e}", path.display())))?;
        self.root.insert(key.to_string(), value);
        Ok(())
    }

    /// Fill `seed` from the environment when neither flag nor file set it.
    pub fn seed_fallback(&mut self) -> CliResult<()> {
        if self.root.contains_key("seed") {
            return Ok(());
        }
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse::<u64>().map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            Err(_) => 0,
        };
        self.root.insert("seed".into(), Value::from(seed));
        Ok(())
    }

    pub fn resolve<T: DeserializeOwned>(self) -> CliResult<T> {
        serde_json::from_value(Value::Object(self.root)).map_err(|e| config_err(e.to_string()))
    }
}

/// Default output directory.
pub fn default_out() -> PathBuf {
    PathBuf::from("unalab-out")
}
