//! Output directory bookkeeping: digests of written files and the run
//! manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    /// `None` until the run finishes.
    pub finished_unix_ms: Option<u128>,
    /// File name to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes run outputs into one directory and keeps the manifest current.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates the directory, writes the config snapshot and an unfinished
    /// manifest.
    pub fn start(dir: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: config.u64("seed"),
                config: config.entries().iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
                started_unix_ms: now_ms(),
                finished_unix_ms: None,
                outputs: BTreeMap::new(),
            },
        };
        run.write(SNAPSHOT_FILE, config.snapshot().as_bytes())?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix_ms = Some(now_ms());
        self.save_manifest()?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
