use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one invocation. Written before any work starts and rewritten
/// when the command finishes; one per run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            started_at: chrono::Local::now().to_rfc3339(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(&mut self, dir: &Path, ok: bool) -> Result<()> {
        self.finished_at = Some(chrono::Local::now().to_rfc3339());
        self.status = if ok { "ok" } else { "failed" }.into();
        self.write(dir)
    }
}
