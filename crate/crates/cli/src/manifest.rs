//! Run manifest and artifact output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiments::Artifact;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// `sweep` or the experiment name.
    pub command: String,
    /// Effective configuration as TOML, flags applied.
    pub config: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str, config: String, seeds: Vec<u64>, artifacts: &[Artifact]) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            seeds,
            artifacts: artifacts
                .iter()
                .map(|a| ArtifactEntry { path: a.name.clone(), sha256: sha256_hex(&a.bytes) })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if sha256_hex(m.config.as_bytes()) != m.config_sha256 {
            return Err(CliError::Validation(format!("{}: config hash does not match", path.display())));
        }
        Ok(m)
    }
}

/// Writes the artifacts one at a time, then the manifest.
pub fn write_outputs(dir: &Path, manifest: &Manifest, artifacts: &[Artifact]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    for a in artifacts {
        let p = dir.join(&a.name);
        std::fs::write(&p, &a.bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    let p = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(&p, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    Ok(p)
}
