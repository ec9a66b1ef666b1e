//! Per-command run manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Parsed arguments plus any configuration they resolved to.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
    pub summary: serde_json::Value,
    pub failures: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
            summary: serde_json::Value::Null,
            failures: Vec::new(),
        }
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.retain(|a| a.path != path);
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    /// Records every regular file under `dir` except the manifest itself.
    pub fn outputs_under(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(dir, &mut files)?;
        files.sort();
        for f in files {
            if f.file_name().is_some_and(|n| n != FILE_NAME) {
                self.output(&f)?;
            }
        }
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
