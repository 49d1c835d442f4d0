//! Run manifests: one `manifest.txt` per run directory recording the
//! command, seed, effective configuration, input hashes, and artifact
//! hashes, closed by a content hash over all of it.
//!
//! The `created_unix` timestamp is written for bookkeeping but excluded
//! from `content_hash`, so two runs with identical inputs and outputs get
//! identical hashes — that equality is the idempotence check.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use skinfuse::{Error, Result};

pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> RunManifest {
        let mut m = RunManifest { entries: Vec::new() };
        m.push("format", "fusion-run-v1");
        m.push("command", command);
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    /// Records an input path and the hash of its current content.
    pub fn push_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.push(format!("input.{label}"), path.display().to_string());
        self.push(format!("input.{label}.sha256"), sha256_path(path)?);
        Ok(())
    }

    /// Records an artifact path (relative to the run directory) and its
    /// content hash. Call after the artifact is fully written.
    pub fn push_artifact(&mut self, label: &str, run_dir: &Path, rel: &str) -> Result<()> {
        self.push(format!("artifact.{label}"), rel.to_string());
        self.push(format!("artifact.{label}.sha256"), sha256_path(&run_dir.join(rel))?);
        Ok(())
    }

    /// Hash over every recorded entry (timestamp excluded by construction:
    /// it is only appended at write time).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in &self.entries {
            hasher.update(k.as_bytes());
            hasher.update(b" = ");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hex(&hasher.finalize())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let created =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str(&format!("created_unix = {created}\n"));
        text.push_str(&format!("content_hash = {}\n", self.content_hash()));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, or of a directory's full content: every file
/// under it, visited in sorted relative-path order, hashed as
/// `relative-path NUL length NUL bytes`.
pub fn sha256_path(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    if meta.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        hasher.update(&bytes);
        return Ok(hex(&hasher.finalize()));
    }
    let mut files = Vec::new();
    collect_files(path, Path::new(""), &mut files)?;
    files.sort();
    for rel in files {
        let bytes = std::fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(
    root: &Path,
    rel: &Path,
    out: &mut Vec<std::path::PathBuf>,
) -> Result<()> {
    let dir = root.join(rel);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let child = rel.join(entry.file_name());
        let kind = entry.file_type().map_err(|e| Error::io(root.join(&child), e))?;
        if kind.is_dir() {
            collect_files(root, &child, out)?;
        } else {
            out.push(child);
        }
    }
    Ok(())
}
