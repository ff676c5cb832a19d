use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Record of a run directory: resolved config, digests of every output and
/// per-stage timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub code_version: String,
    pub config_digest: String,
    pub config: String,
    #[serde(default)]
    pub dataset_digest: Option<String>,
    /// Wall-clock seconds per stage.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Relative path to sha256.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        RunManifest {
            status: RunStatus::Ok,
            error: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: cfg.digest(),
            config: cfg.resolved(),
            dataset_digest: None,
            timings: BTreeMap::new(),
            metrics: BTreeMap::new(),
            files: BTreeMap::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The manifest in `dir` when it was produced under the same config, else a fresh one.
    pub fn open(dir: &Path, cfg: &RunConfig) -> Self {
        match Self::read(&dir.join(MANIFEST_FILE)) {
            Ok(m) if m.config_digest == cfg.digest() => m,
            _ => Self::new(cfg),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config, &[])
    }

    /// Digest `rel` (relative to `dir`) into the file table.
    pub fn record_file(&mut self, dir: &Path, rel: &str) -> Result<String> {
        let d = sha256_file(&dir.join(rel))?;
        self.files.insert(rel.to_string(), d.clone());
        Ok(d)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Files whose current digest differs from the recorded one (or are missing).
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        if RunConfig::from_toml(&self.config, &[]).map(|c| c.digest()).ok().as_deref() != Some(&self.config_digest) {
            bad.push("<config digest>".to_string());
        }
        for (rel, digest) in &self.files {
            match sha256_file(&dir.join(rel)) {
                Ok(d) if &d == digest => {}
                _ => bad.push(rel.clone()),
            }
        }
        bad
    }
}
