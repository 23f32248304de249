use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Data files and their checksums.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl DatasetManifest {
    /// Records `paths`; relative paths are stored as given.
    pub fn record<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let files = paths
            .iter()
            .map(|p| {
                let path = p.as_ref();
                let (sha256, bytes) = sha256_file(path)?;
                Ok(ManifestEntry {
                    path: path.to_path_buf(),
                    sha256,
                    bytes,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { files })
    }

    /// Checks every entry; relative paths resolve against `base`.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for entry in &self.files {
            let path = if entry.path.is_absolute() {
                entry.path.clone()
            } else {
                base.join(&entry.path)
            };
            let (sha, _) = sha256_file(&path)?;
            if sha != entry.sha256 {
                return Err(Error::ChecksumMismatch { path });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
