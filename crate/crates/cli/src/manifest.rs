//! Provenance record embedded in every output artifact.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` pins it.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        command: &str,
        config: &C,
        seed: u64,
        inputs: &[&Path],
    ) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| digest_file(p))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            inputs,
            timestamp: timestamp(),
        })
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path).map_err(|e| crate::CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: digest_bytes(&bytes),
    })
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

/// An artifact as written to disk: the result plus its manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub manifest: RunManifest,
    pub result: T,
}
