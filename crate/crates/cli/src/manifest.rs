use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sst_core::SurvivalDataset;

/// Provenance written next to every artifact as `<artifact>.manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_sha256: String,
    pub seeds: Vec<u64>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, dataset_sha256: String, seeds: Vec<u64>, seconds: f64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            dataset_sha256,
            seeds,
            seconds,
        }
    }

    pub fn write_for(&self, artifact: &Path) -> std::io::Result<PathBuf> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// SHA-256 of the preprocessed dataset bytes.
pub fn fingerprint(ds: &SurvivalDataset) -> String {
    hex::encode(Sha256::digest(ds.canonical_bytes()))
}
