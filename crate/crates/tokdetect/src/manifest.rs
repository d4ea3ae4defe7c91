//! Reproducibility record written beside the outputs of every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsio::{sha256_file, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The fully resolved configuration the command ran with.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            duration_seconds: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn finish(&mut self, elapsed: Duration) {
        self.duration_seconds = elapsed.as_secs_f64();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// `dir/run_manifest.json` for directory outputs, `file.manifest.json` for file outputs.
pub fn manifest_path_for(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("run_manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_recomputable() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.txt");
        std::fs::write(&out, "payload").unwrap();
        let mut m = RunManifest::new("stats", serde_json::json!({"k": 1}), Some(3));
        m.output(&out).unwrap();
        let path = manifest_path_for(&out, false);
        m.write(&path).unwrap();
        assert!(path.ends_with("o.txt.manifest.json"));
        let back: RunManifest = crate::fsio::read_json(&path).unwrap();
        assert_eq!(back.outputs[&out.display().to_string()], sha256_file(&out).unwrap());
    }
}
