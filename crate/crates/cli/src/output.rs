//! File writing helpers. Every output goes through one of these so that a
//! file is either complete or absent.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Write `bytes` to a sibling temporary file, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    write_atomic(path, (text + "\n").as_bytes())
}

/// Render with `f` into memory, then write atomically.
pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed taken from the first eight bytes of a SHA-256 hex digest.
pub fn seed_from_hash(hex: &str) -> u64 {
    u64::from_str_radix(&hex[..16], 16).unwrap_or(0)
}

pub fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Directory name for one pressure, e.g. `p5.3e-2mbar`.
pub fn pressure_dir(p: f64) -> String {
    format!("p{p:e}mbar")
}

/// Paths relative to `root`, as written in manifests.
pub fn relative(root: &Path, paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub timings_s: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: &str, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            started_unix_s: unix_time(),
            finished_unix_s: 0.0,
            outputs: Vec::new(),
            failures: Vec::new(),
            timings_s: Vec::new(),
        }
    }

    /// Stamp the finish time and write `manifest.json` under `root`.
    pub fn finish(mut self, root: &Path, outputs: &[PathBuf]) -> Result<()> {
        self.outputs = relative(root, outputs);
        self.outputs.sort();
        self.finished_unix_s = unix_time();
        write_json(&root.join("manifest.json"), &self)
    }
}
