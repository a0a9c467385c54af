//! Stage manifests: content hashes that make runs reproducible and let later
//! stages refuse mismatched inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Collects consumed and produced artifacts for one stage and writes the
/// manifest at the end.
pub struct StageContext {
    run_dir: PathBuf,
    stage: String,
    config_sha256: String,
    inputs: Vec<ArtifactRef>,
    outputs: Vec<ArtifactRef>,
}

impl StageContext {
    pub fn new(run_dir: &Path, stage: &str, config_sha256: String) -> StageContext {
        StageContext {
            run_dir: run_dir.to_path_buf(),
            stage: stage.to_string(),
            config_sha256,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn err(&self, message: String, artifact: Option<String>) -> StageError {
        StageError {
            stage: self.stage.clone(),
            message,
            artifact,
        }
    }

    /// Registers an input artifact, verifying its bytes against the hash the
    /// producing stage recorded.
    pub fn consume(&mut self, rel: &str, producer: &str) -> Result<PathBuf, StageError> {
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(|e| {
            self.err(
                format!("cannot read input produced by `{producer}`: {e}"),
                Some(rel.to_string()),
            )
        })?;
        let hash = sha256_hex(&bytes);
        let manifest = self.load_manifest(producer)?;
        let recorded = manifest
            .outputs
            .iter()
            .find(|a| a.path == rel)
            .ok_or_else(|| {
                self.err(
                    format!("stage `{producer}` did not record this artifact"),
                    Some(rel.to_string()),
                )
            })?;
        if recorded.sha256 != hash {
            return Err(self.err(
                format!(
                    "artifact hash mismatch: expected {} from stage `{producer}`, found {}",
                    recorded.sha256, hash
                ),
                Some(rel.to_string()),
            ));
        }
        if manifest.config_sha256 != self.config_sha256 {
            return Err(self.err(
                format!("stage `{producer}` ran under a different configuration"),
                Some(format!("{producer}/manifest.json")),
            ));
        }
        self.inputs.push(ArtifactRef {
            path: rel.to_string(),
            sha256: hash,
        });
        Ok(path)
    }

    pub fn load_manifest(&self, stage: &str) -> Result<Manifest, StageError> {
        let path = self.run_dir.join(stage).join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| {
            self.err(
                format!("stage `{stage}` has not run here: {e}"),
                Some(format!("{stage}/manifest.json")),
            )
        })?;
        serde_json::from_slice(&bytes).map_err(|e| {
            self.err(
                format!("stage `{stage}` manifest is unreadable: {e}"),
                Some(format!("{stage}/manifest.json")),
            )
        })
    }

    /// Writes bytes under the run directory and records the output hash.
    pub fn produce(&mut self, rel: &str, bytes: &[u8]) -> Result<(), StageError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| self.err(format!("cannot create directory: {e}"), Some(rel.to_string())))?;
        }
        fs::write(&path, bytes)
            .map_err(|e| self.err(format!("cannot write artifact: {e}"), Some(rel.to_string())))?;
        self.outputs.push(ArtifactRef {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Records an output that was written through another writer (tensors).
    pub fn record_output(&mut self, rel: &str) -> Result<(), StageError> {
        let path = self.path(rel);
        let hash = hash_file(&path)
            .map_err(|e| self.err(format!("cannot hash artifact: {e}"), Some(rel.to_string())))?;
        self.outputs.push(ArtifactRef {
            path: rel.to_string(),
            sha256: hash,
        });
        Ok(())
    }

    pub fn serialize_json<T: Serialize>(&self, value: &T) -> Result<Vec<u8>, StageError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StageError {
            stage: self.stage.clone(),
            message: format!("serialization failed: {e}"),
            artifact: None,
        })?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Writes the stage manifest; call last.
    pub fn finish(self) -> Result<(), StageError> {
        let manifest = Manifest {
            stage: self.stage.clone(),
            config_sha256: self.config_sha256.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| StageError {
            stage: self.stage.clone(),
            message: format!("manifest serialization failed: {e}"),
            artifact: None,
        })?;
        let path = self.run_dir.join(&self.stage).join("manifest.json");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| StageError {
                stage: self.stage.clone(),
                message: format!("cannot create stage directory: {e}"),
                artifact: None,
            })?;
        }
        fs::write(&path, bytes).map_err(|e| StageError {
            stage: self.stage.clone(),
            message: format!("cannot write manifest: {e}"),
            artifact: None,
        })?;
        Ok(())
    }
}
