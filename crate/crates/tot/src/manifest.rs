//! Run manifests: what ran, with which resolved configuration, on which
//! inputs, producing which files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::formats::write_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// SHA-256 of `blob <len>\0<content>`, as git hashes blobs.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Full command line, program name first.
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Hash over the resolved config and every input digest.
    pub content_hash: String,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub wall_clock_ms: u128,
}

/// Git-style blob hash with SHA-256.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn digest_file(path: &Path) -> CliResult<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: blob_hash(&bytes),
    })
}

pub fn content_hash(config: &serde_json::Value, inputs: &[InputDigest]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("json value serializes"));
    for d in inputs {
        h.update(d.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Manifest path for a primary output: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Encode(e.to_string()))?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Json(format!("{}: {e}", path.display())))
    }
}
