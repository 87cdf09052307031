//! Stage orchestration: a manifest tying every derived artifact to a
//! content hash, plus atomic file writes so interrupted runs never leave
//! half-written artifacts behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Records what each pipeline stage produced and from which inputs, with
/// SHA-256 hashes so downstream stages (and determinism checks) can
/// verify artifacts byte-for-byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    /// Artifact name -> (relative path, sha256 hex).
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

impl PipelineManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let data = fs::read(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_slice(&data)
            .map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })
    }

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST_NAME).exists() {
            Self::load(dir)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        atomic_write(&dir.join(MANIFEST_NAME), &body)
    }

    /// Registers `path` (relative to `dir`) under `name`, hashing its
    /// current on-disk contents.
    pub fn record(&mut self, dir: &Path, name: &str, relative: &str) -> Result<()> {
        let sha256 = sha256_file(&dir.join(relative))?;
        self.artifacts
            .insert(name.to_string(), ArtifactRecord { path: relative.to_string(), sha256 });
        Ok(())
    }

    /// Resolves a recorded artifact, verifying its hash still matches.
    pub fn resolve(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let record = self.artifacts.get(name).ok_or_else(|| {
            Error::Data(format!("manifest has no artifact named '{name}'"))
        })?;
        let path = dir.join(&record.path);
        let actual = sha256_file(&path)?;
        if actual != record.sha256 {
            return Err(Error::Data(format!(
                "artifact '{name}' at {} does not match its recorded hash (expected {}, found {actual})",
                path.display(),
                record.sha256
            )));
        }
        Ok(path)
    }
}

/// Writes via a temporary sibling file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Streams a file through SHA-256, returning lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(crate::model::hex_string(&hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    crate::model::hex_string(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_round_trips_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        atomic_write(&path, b"first").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"first");
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        // No stray temp files.
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "out.txt")
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn known_sha256_vector() {
        // SHA-256 of "abc".
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(sha256_file(&path).unwrap(), sha256_bytes(b"abc"));
    }

    #[test]
    fn manifest_records_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("vocab.tsv"), b"contents").unwrap();
        let mut m = PipelineManifest { preset: Some("setting1".into()), seed: Some(7), ..Default::default() };
        m.record(dir.path(), "entity_vocab", "vocab.tsv").unwrap();
        m.save(dir.path()).unwrap();

        let loaded = PipelineManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.resolve(dir.path(), "entity_vocab").unwrap(), dir.path().join("vocab.tsv"));

        fs::write(dir.path().join("vocab.tsv"), b"tampered").unwrap();
        assert!(loaded.resolve(dir.path(), "entity_vocab").is_err());
        assert!(loaded.resolve(dir.path(), "missing").is_err());
    }
}
