use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mcoem_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub started_unix_secs: f64,
    pub finished_unix_secs: f64,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub status: &'static str,
    pub command: String,
    pub kind: String,
    pub message: String,
    /// Field path for configuration errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ErrorRecord {
    pub fn from_error(command: &str, e: &Error) -> Self {
        let field = match e {
            Error::Config { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self {
            status: "error",
            command: command.to_string(),
            kind: e.kind().to_string(),
            message: e.to_string(),
            field,
        }
    }
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn hash_file(path: &Path, shown: String) -> Result<FileHash> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(FileHash {
        path: shown,
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Every regular file under `path`, in sorted order.
pub fn hash_tree(path: &Path) -> Result<Vec<FileHash>> {
    let mut files = Vec::new();
    collect(path, &mut files)?;
    files.sort();
    files
        .iter()
        .map(|f| hash_file(f, f.display().to_string()))
        .collect()
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(io)? {
            collect(&entry.map_err(io)?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Artifacts are recorded relative to `out`.
pub fn artifact_hashes(out: &Path, artifacts: &[PathBuf]) -> Result<Vec<FileHash>> {
    let mut sorted = artifacts.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .iter()
        .map(|p| {
            let shown = p.strip_prefix(out).unwrap_or(p).display().to_string();
            hash_file(p, shown)
        })
        .collect()
}

pub fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
