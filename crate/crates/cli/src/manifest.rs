use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct ManifestBuilder {
    run_name: String,
    command: String,
    config_hash: String,
    started: DateTime<Utc>,
    out: PathBuf,
    files: Vec<FileEntry>,
}

impl ManifestBuilder {
    pub fn start(run_name: &str, command: &str, config_json: &str, out: &Path) -> Self {
        Self {
            run_name: run_name.into(),
            command: command.into(),
            config_hash: sha256_hex(config_json.as_bytes()),
            started: Utc::now(),
            out: out.to_path_buf(),
            files: Vec::new(),
        }
    }

    /// Write `contents` to `name` inside the output directory and record it.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, contents);
        Ok(path)
    }

    /// Record a file some other routine already wrote into the output directory.
    pub fn add_existing(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.record(&name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(FileEntry {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn finish(self) -> Result<(PathBuf, RunManifest)> {
        let manifest = RunManifest {
            run_name: self.run_name,
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config_hash,
            started_at: timestamp(self.started),
            finished_at: timestamp(Utc::now()),
            files: self.files,
        };
        let path = self.out.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok((path, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ManifestBuilder::start("r", "gen-data", "{}", dir.path());
        m.write("a.txt", b"hello").unwrap();
        let (path, manifest) = m.finish().unwrap();
        assert!(path.ends_with("manifest-gen-data.json"));
        assert_eq!(manifest.files.len(), 1);
        assert_eq!(manifest.files[0].sha256, sha256_hex(b"hello"));
        assert_eq!(manifest.config_hash, sha256_hex(b"{}"));
        assert!(manifest.started_at <= manifest.finished_at);
    }
}
