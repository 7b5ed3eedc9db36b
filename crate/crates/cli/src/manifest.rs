use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use edgebridge::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Written once, before any work, so a run can be replayed from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<TrainConfig>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: Option<TrainConfig>, seed: u64, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.into(),
            argv,
            config,
            seed,
            version: version_tag(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs,
        }
    }

    /// Never overwrites: a resumed run in the same directory gets
    /// `run_manifest.1.json` and so on.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut path = dir.join(MANIFEST_FILE);
        let mut n = 1;
        while path.exists() {
            path = dir.join(format!("run_manifest.{n}.json"));
            n += 1;
        }
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn version_tag() -> String {
    match option_env!("EDGEBRIDGE_BUILD_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}
