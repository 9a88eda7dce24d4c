//! Run directories and the manifest written into each before work starts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Fully resolved configuration, when the command has one.
    pub config: Option<serde_json::Value>,
    /// Command-specific settings such as the spectral tap.
    #[serde(default)]
    pub settings: serde_json::Map<String, serde_json::Value>,
    /// Relative to the run directory.
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
    pub status: Status,
    pub error: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<serde_json::Value>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            config,
            settings: Default::default(),
            artifacts: Vec::new(),
            started: now(),
            finished: None,
            status: Status::Running,
            error: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &p)?;
        Ok(())
    }

    pub fn add_artifact(&mut self, rel: impl Into<PathBuf>) {
        let rel = rel.into();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    /// Marks the run finished; on success every artifact must exist.
    pub fn finish(&mut self, dir: &Path, outcome: &Result<()>) -> Result<()> {
        self.finished = Some(now());
        match outcome {
            Ok(()) => {
                if let Some(missing) = self.artifacts.iter().find(|a| !dir.join(a).exists()) {
                    self.status = Status::Failed;
                    self.error = Some(format!("artifact {} was not written", missing.display()));
                } else {
                    self.status = Status::Ok;
                }
            }
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.write(dir)
    }
}

fn now() -> String {
    chrono::Local::now().to_rfc3339()
}

/// `<root>/<YYYYmmdd-HHMMSS>-seed<seed>-<command>`, with a numeric suffix
/// if that already exists.
pub fn new_run_dir(root: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}-{command}");
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}.{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}
