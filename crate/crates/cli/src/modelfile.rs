//! Versioned JSON layout for trained models.
//!
//! ```text
//! { "format": "unalab-model", "version": 1, "input_dim": D,
//!   "spec": <ModelSpec>, "stats": <NormStats or null>, "model": <TrainedModel> }
//! ```
//! `stats` maps raw inputs/targets to the scale the model was trained on.
//! Files with another format tag or version are refused.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unalab::bench::NormStats;
use unalab::model::{ModelSpec, TrainedModel};

use crate::error::{config_err, CliResult};

pub const MODEL_FORMAT: &str = "unalab-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub spec: ModelSpec,
    pub stats: Option<NormStats>,
    pub model: TrainedModel,
}

impl ModelFile {
    pub fn new(spec: ModelSpec, stats: Option<NormStats>, model: TrainedModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            input_dim: model.input_dim(),
            spec,
            stats,
            model,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("--model-file {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("--model-file {}: {e}", path.display())))?;
        let format = value.get("format").and_then(Value::as_str);
        let version = value.get("version").and_then(Value::as_u64);
        if format != Some(MODEL_FORMAT) || version != Some(MODEL_FORMAT_VERSION as u64) {
            return Err(config_err(format!(
                "--model-file {}: expected format {MODEL_FORMAT:?} version {MODEL_FORMAT_VERSION}, found {format:?} version {version:?}",
                path.display()
            )));
        }
        serde_json::from_value(value).map_err(|e| config_err(format!("--model-file {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
