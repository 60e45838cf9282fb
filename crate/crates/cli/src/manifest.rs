//! Run manifests: a JSON record of what a command read, what it wrote, and
//! the seeds it ran under — enough to re-execute bit-identically and to
//! detect tampered artifacts afterwards.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A file the run touched, with its content fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Inputs keep the path as given; artifacts are relative to the
    /// manifest's directory so a run directory can be archived and moved.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub checkpoint_format_version: u32,
    pub state_format_version: u32,
    pub config: FileDigest,
    /// Every seed the command consumed, by role.
    pub seeds: BTreeMap<String, u64>,
    /// Files read: the config's dataset specs and flow CSVs.
    pub inputs: Vec<FileDigest>,
    /// Files written, except the manifest itself.
    pub artifacts: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::read(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config_path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format_version: flowsentry::model::CHECKPOINT_VERSION,
            state_format_version: flowsentry::preprocess::STATE_FORMAT_VERSION,
            config: FileDigest {
                path: config_path.display().to_string(),
                sha256: sha256_file(config_path)?,
            },
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn seed(&mut self, role: &str, value: u64) -> &mut Self {
        self.seeds.insert(role.to_string(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    /// Records an artifact by its path relative to the output directory.
    pub fn artifact(&mut self, out_dir: &Path, name: &str) -> Result<&mut Self, CliError> {
        self.artifacts.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_file(&out_dir.join(name))?,
        });
        Ok(self)
    }

    /// Writes `<command>.manifest.json` into the output directory and
    /// returns its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text).map_err(|e| CliError::write(&path, e))?;
        Ok(path)
    }
}

/// Re-hashes every artifact a manifest lists, relative to the manifest's
/// directory. Any missing or altered file fails the verification.
pub fn verify(manifest_path: &Path) -> Result<RunManifest, CliError> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| CliError::read(manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| {
        CliError::Data(format!("malformed manifest {}: {e}", manifest_path.display()))
    })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    for artifact in &manifest.artifacts {
        let live = sha256_file(&dir.join(&artifact.path))?;
        if live != artifact.sha256 {
            return Err(CliError::Data(format!(
                "artifact {} does not match its manifest: recorded {}, found {live}",
                artifact.path, artifact.sha256
            )));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verification_accepts_untouched_artifacts_and_flags_edits() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.json");
        std::fs::write(&config, "{}").unwrap();
        std::fs::write(dir.path().join("result.csv"), "a,b\n1,2\n").unwrap();

        let mut manifest = RunManifest::new("train", &config).unwrap();
        manifest.seed("train", 7);
        manifest.artifact(dir.path(), "result.csv").unwrap();
        let path = manifest.write(dir.path()).unwrap();
        assert!(path.ends_with("train.manifest.json"));

        verify(&path).unwrap();

        std::fs::write(dir.path().join("result.csv"), "a,b\n1,3\n").unwrap();
        let err = verify(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("result.csv"));
    }

    #[test]
    fn hashes_are_stable_and_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, "same").unwrap();
        std::fs::write(&b, "same").unwrap();
        assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());
        std::fs::write(&b, "different").unwrap();
        assert_ne!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());
    }
}
