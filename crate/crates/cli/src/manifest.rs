use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

/// Everything needed to rerun a command. Timestamps are the only fields
/// that differ between identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub seed: Option<u64>,
    pub parameters: serde_json::Value,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(subcommand: &str, spec_path: &Path, spec_bytes: &[u8], seed: Option<u64>, parameters: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            spec_path: spec_path.display().to_string(),
            spec_sha256: sha256_hex(spec_bytes),
            seed,
            parameters,
            started_unix: now_unix(),
            finished_unix: None,
        }
    }

    pub fn finish(mut self) -> Self {
        self.finished_unix = Some(now_unix());
        self
    }
}
