//! Run manifests: enough context to reproduce every output bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// FNV-1a 64-bit digest; cheap, deterministic, good enough for change
/// detection (not cryptographic).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub digest: String,
}

pub fn file_entry(base: &Path, path: &Path) -> Result<FileEntry> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot digest {}", path.display()))?;
    let rel = path.strip_prefix(base).unwrap_or(path);
    Ok(FileEntry {
        path: rel.to_string_lossy().replace('\\', "/"),
        digest: format!("{:016x}", fnv1a64(&bytes)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub master: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub chain_streams: Vec<u64>,
}

/// The manifest written next to every command's outputs. Data-file digests
/// (`outputs`) are what reproducibility is checked against; the timestamp is
/// informational.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub digest_algo: &'static str,
    pub config: BTreeMap<String, String>,
    pub seeds: Seeds,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Seeds) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            digest_algo: "fnv1a64",
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
