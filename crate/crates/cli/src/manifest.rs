//! Run manifests: enough provenance to reproduce a run exactly.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use dff_core::data::atomic_write;
use dff_core::error::{Error, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub outputs: Vec<String>,
}

/// Hashes the canonical form of a JSON document: objects are re-serialized
/// with sorted keys, so the hash ignores key order and whitespace.
pub fn config_hash(text: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
    let canonical = serde_json::to_vec(&value).expect("Value serializes");
    let digest = Sha256::digest(&canonical);
    let mut hex = String::with_capacity(2 * digest.len());
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Captures the start of a run; `finish` seals it into `manifest.json`.
pub struct RunRecorder {
    config_hash: String,
    seed: u64,
    started_unix_ms: u64,
}

impl RunRecorder {
    pub fn start(config_text: &str, seed: u64) -> Result<Self> {
        Ok(RunRecorder {
            config_hash: config_hash(config_text)?,
            seed,
            started_unix_ms: now_ms(),
        })
    }

    pub fn finish<S: ToString>(
        self,
        dir: &Path,
        outputs: impl IntoIterator<Item = S>,
    ) -> Result<()> {
        let manifest = RunManifest {
            config_hash: self.config_hash,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
            outputs: outputs.into_iter().map(|s| s.to_string()).collect(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        atomic_write(&dir.join("manifest.json"), &bytes)
    }
}
