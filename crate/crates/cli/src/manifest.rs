use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub command: String,
    pub config: Value,
    pub master_seed: u64,
    /// Relative to the run directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

/// An output directory being filled by one command.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunDir {
    /// `out`, or a fresh `run/<utc timestamp>` directory.
    pub fn create(out: Option<&Path>, command: &str, master_seed: u64) -> Result<Self, CliError> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
                Path::new("run").join(stamp)
            }
        };
        fs::create_dir_all(&path)?;
        Ok(Self {
            path,
            manifest: RunManifest {
                command_line: std::env::args().collect(),
                command: command.into(),
                config: Value::Null,
                master_seed,
                artifacts: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                started_at: now(),
                finished_at: String::new(),
            },
        })
    }

    pub fn set_config(&mut self, config: &impl Serialize) -> Result<(), CliError> {
        self.manifest.config = serde_json::to_value(config).map_err(CliError::internal)?;
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Record an artifact written under the run directory.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.path).unwrap_or(path);
        self.manifest
            .artifacts
            .push(rel.to_string_lossy().into_owned());
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.finished_at = now();
        self.manifest.artifacts.sort();
        self.manifest.artifacts.dedup();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(CliError::internal)?;
        fs::write(self.path.join(MANIFEST_FILE), text + "\n")?;
        Ok(self.path)
    }
}
