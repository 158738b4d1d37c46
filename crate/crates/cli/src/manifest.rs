//! Per-command run manifest with SHA-256 hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Path to hex SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to hex SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(command: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            seed,
            out: out.to_path_buf(),
            started_unix: now_unix(),
            finished_unix: 0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Manifest location: `manifest.json` inside a directory output,
    /// `<file>.manifest.json` next to a file output.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join("manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.finished_unix = now_unix();
        let path = Self::path_for(&self.out);
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }
}
