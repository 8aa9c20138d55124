use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use tspo_core::{Error, Result};

/// Record of one CLI invocation, stored beside each artifact it produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Every setting the run used, defaults included.
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    sibling(artifact, "manifest.json")
}

/// `dir/name.ext` → `dir/name.ext.<suffix>`.
pub fn sibling(artifact: &Path, suffix: &str) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    artifact.with_file_name(name)
}

impl RunManifest {
    /// Writes through a temporary file and a rename so readers never see a
    /// half-written manifest.
    pub fn write_next_to(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        let tmp = sibling(&path, "tmp");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
