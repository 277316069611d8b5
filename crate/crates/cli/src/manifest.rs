//! Run manifests: configuration echo plus content hashes of inputs and
//! outputs.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::exit::CliResult;

/// SHA-256 over `"blob <len>\0" + content`, the git object layout.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub blob_sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, label: impl Into<String>) -> CliResult<Self> {
        let content = std::fs::read(path).map_err(|e| crate::exit::CliError::data(format!("{}: {e}", path.display())))?;
        Ok(Self { path: label.into(), bytes: content.len() as u64, blob_sha256: blob_hash(&content) })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize, E: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// `completed`, `diverged` or `failed`.
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub config: C,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub extra: E,
}

impl<C: Serialize, E: Serialize> Manifest<C, E> {
    pub fn new(command: &'static str, status: &'static str, config: C, extra: E) -> Self {
        Self {
            tool: "rblock",
            version: env!("CARGO_PKG_VERSION"),
            command,
            status,
            detail: None,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra,
        }
    }

    /// Hashes the named files inside `dir` and writes `manifest.json` there.
    pub fn write(mut self, dir: &Path, outputs: &[&str]) -> CliResult<()> {
        for name in outputs {
            self.outputs.push(FileDigest::of(&dir.join(name), *name)?);
        }
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_layout() {
        // sha256(b"blob 6\0hello\n")
        assert_eq!(blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }
}
