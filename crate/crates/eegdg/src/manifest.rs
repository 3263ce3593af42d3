//! Run manifests: enough provenance to reproduce any output directory.

use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written once per run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration the run actually used.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Stamps the end time and writes `manifest.json` into the directory.
    pub fn finish_into(mut self, dir: &Path) -> Result<()> {
        self.finished_unix_ms = now_unix_ms();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text)
            .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
    }
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Streaming SHA-256 of a file, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}
