use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const RUN_MANIFEST: &str = "run.json";

/// Record of one command invocation, written last into its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Fully resolved settings; rerunning with these reproduces the outputs.
    pub settings: serde_json::Value,
    /// Files written, relative to `output_dir`.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            checkpoint: None,
            output_dir: output_dir.to_path_buf(),
            started_unix: now(),
            finished_unix: 0,
            settings: serde_json::Value::Null,
            artifacts: Vec::new(),
        }
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.finished_unix = now();
        self.artifacts.sort();
        self.artifacts.dedup();
        let path = self.output_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `contents` to `output_dir/name` and records it.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.output_dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty && !force {
            return Err(UsageError(format!("output directory {} is not empty (use --force)", dir.display())).into());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
