//! Run manifests and deterministic JSON output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to reproduce an artifact. Contains no timestamps, so
/// reruns with the same inputs produce identical bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_paths: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, keyed by path as given.
    pub artifacts: BTreeMap<String, String>,
    pub toolkit_version: String,
}

impl RunManifest {
    pub fn new(argv: &[String]) -> Self {
        Self {
            command: argv.iter().skip(1).cloned().collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.artifacts.insert(
            path.display().to_string(),
            format!("{:x}", Sha256::digest(&bytes)),
        );
        Ok(())
    }

    pub fn config(&mut self, path: &Path) -> Result<()> {
        self.config_paths.push(path.display().to_string());
        self.hash_input(path)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serialises")
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
