//! Run directories and the manifest written into each of them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, IoContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// SHA-256 of a file, or of the sorted `relative-path\0file-digest\n` listing of a directory.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub started_at: String,
    pub seed: Option<u64>,
    /// Effective configuration after file and flag overrides, as TOML.
    pub config: String,
    pub inputs: Vec<InputDigest>,
    /// SHA-256 over all input digests in order.
    pub inputs_sha256: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub status: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Content hash of a file or directory tree; independent of where it lives.
pub fn content_hash(path: &Path) -> CliResult<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().replace('\\', "/").as_bytes());
        h.update([0]);
        h.update(sha256_file(&path.join(&rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

pub fn digest_inputs(paths: &[PathBuf]) -> CliResult<(Vec<InputDigest>, String)> {
    let inputs = paths
        .iter()
        .map(|p| Ok(InputDigest { path: p.clone(), sha256: content_hash(p)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let mut h = Sha256::new();
    for d in &inputs {
        h.update(d.sha256.as_bytes());
        h.update(b"\n");
    }
    Ok((inputs, hex::encode(h.finalize())))
}

/// `<root>/<timestamp>-<command>`, suffixed if it already exists.
pub fn fresh_run_dir(root: &Path, command: &str, stamp: &str) -> CliResult<PathBuf> {
    let base = root.join(format!("{stamp}-{command}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).at(&dir)?;
    Ok(dir)
}

impl RunManifest {
    pub fn write(&self, run_dir: &Path) -> CliResult<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).at(&path)
    }
}
