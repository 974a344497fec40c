use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

/// Everything needed to audit or repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub seed: u64,
    /// The effective configuration, as TOML.
    pub config: String,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub digests: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, HarnessError> {
    let bytes = fs::read(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))
    }

    pub fn load(run_dir: &Path) -> Result<Self, HarnessError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Recomputes every recorded digest from disk and returns the paths
    /// whose contents no longer match (missing files included).
    pub fn verify(&self, run_dir: &Path) -> Vec<String> {
        self.digests
            .iter()
            .filter(|(rel, expected)| file_digest(&run_dir.join(rel)).map_or(true, |d| &d != *expected))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}
