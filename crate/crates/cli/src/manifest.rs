//! Run manifests: every command records its resolved config, seed, code
//! version, input digests and declared output paths before outputs are
//! finalized, so every artifact directory is self-describing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::digest::{file_digest, json_digest};
use crate::{runtime_err, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let config_hash = json_digest(&config);
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_secs: 0.0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)
            .map_err(|e| runtime_err(format!("digesting {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn declare_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(runtime_err)?;
        std::fs::write(path, text)
            .map_err(|e| runtime_err(format!("writing {}: {e}", path.display())))
    }
}

pub fn manifest_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}
