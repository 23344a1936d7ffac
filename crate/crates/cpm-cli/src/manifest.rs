//! Run provenance: each command ends by writing a manifest naming the
//! resolved config, every input it read (by digest), every file it wrote,
//! and how long it took.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cpm_core::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved config document.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Input path → SHA-256 of its bytes, for provenance reconstruction.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    seeds: Vec<u64>,
    input_digests: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, resolved_config: &str, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: sha256_hex(resolved_config.as_bytes()),
            seeds,
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Registers an input file, digesting it immediately.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.input_digests.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Writes `manifest.json` into `dir` atomically (temp file + rename)
    /// and returns the finished manifest.
    pub fn write(self, dir: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seeds: self.seeds,
            input_digests: self.input_digests,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Format(format!("cannot serialize manifest: {e}")))?;
        let tmp = dir.join("manifest.json.tmp");
        let path = dir.join("manifest.json");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable_and_differ_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "hello").unwrap();
        std::fs::write(&b, "hello").unwrap();
        assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());
        assert_eq!(
            sha256_file(&a).unwrap(),
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        std::fs::write(&b, "world").unwrap();
        assert_ne!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());
    }

    #[test]
    fn manifest_lands_atomically_with_all_fields() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.jsonl");
        std::fs::write(&input, "{}\n").unwrap();
        let mut builder = ManifestBuilder::new("generate", "[scm]\nk = 4\n", vec![0, 1]);
        builder.input(&input).unwrap();
        builder.output(dir.path().join("out.jsonl"));
        let manifest = builder.write(dir.path()).unwrap();
        assert_eq!(manifest.command, "generate");
        assert_eq!(manifest.seeds, vec![0, 1]);
        assert_eq!(manifest.input_digests.len(), 1);
        assert_eq!(manifest.outputs.len(), 1);
        assert!(manifest.duration_seconds >= 0.0);
        let on_disk: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(on_disk, manifest);
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let mut builder = ManifestBuilder::new("x", "", vec![]);
        assert!(matches!(
            builder.input(Path::new("/nonexistent/file")),
            Err(CoreError::Io(_))
        ));
    }
}
