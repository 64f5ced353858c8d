use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Serialize)]
pub struct Versions {
    pub hamflow: &'static str,
    pub cli: &'static str,
}

/// Written next to every run's outputs; together with `config.toml` it is
/// enough to repeat the run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub versions: Versions,
    pub effective_config: serde_json::Value,
    pub outputs: Vec<String>,
    /// Command-specific facts worth recording (e.g. the sampler's λ).
    pub details: serde_json::Map<String, serde_json::Value>,
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn write(&self, dir: &Path, config_text: &str) -> Result<(), CliError> {
        fs::write(dir.join(CONFIG_COPY), config_text)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.into()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
