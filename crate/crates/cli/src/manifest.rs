//! Run manifests: resolved config, seed, versions, timing and output digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{config_err, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub model_format_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    /// Resolved configuration; feeding it back reproduces the outputs.
    pub config: Value,
    pub wall_clock_ms: u64,
    /// SHA-256 of each input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, keyed by file name inside the output dir.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects written files so the manifest can digest them.
pub struct Outputs {
    pub dir: PathBuf,
    files: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| crate::error::CliError::Runtime(format!("writing {}: {e}", path.display())))
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn finish(self, command: &str, seed: Option<u64>, config: Value, started: std::time::Instant) -> CliResult<RunManifest> {
        let mut outputs = BTreeMap::new();
        for f in &self.files {
            outputs.insert(f.clone(), sha256_file(&self.dir.join(f))?);
        }
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            tool: "unalab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            model_format_version: crate::modelfile::MODEL_FORMAT_VERSION,
            command: command.into(),
            seed,
            config,
            wall_clock_ms: started.elapsed().as_millis() as u64,
            inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("manifest {}: {e}", path.display())))
}
