//! Run manifests: resolved settings plus digests of every input and output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "gega-manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    /// Fully resolved settings; usable as `--config`.
    pub settings: Settings,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn digests(files: &[(&str, PathBuf)]) -> Result<Vec<FileDigest>, CliError> {
    files
        .iter()
        .map(|(role, path)| {
            Ok(FileDigest {
                role: role.to_string(),
                path: path.clone(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// When `config` is a manifest, warns about inputs whose content changed
/// since it was written.
pub fn check_inputs(config: &Path) {
    let Ok(text) = std::fs::read_to_string(config) else {
        return;
    };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
        return;
    };
    for d in &m.inputs {
        match sha256_file(&d.path) {
            Ok(h) if h == d.sha256 => {}
            Ok(_) => log::warn!("{} ({}) changed since the manifest was written", d.path.display(), d.role),
            Err(_) => log::warn!("{} ({}) is no longer readable", d.path.display(), d.role),
        }
    }
}
