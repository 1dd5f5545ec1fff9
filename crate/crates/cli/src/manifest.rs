//! Run manifests: enough resolved state to replay a run bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crft_core::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub subcommand: String,
    pub command: Vec<String>,
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(subcommand: &str, command: Vec<String>, resolved_config: serde_json::Value, seed: u64) -> Self {
        Self {
            version: 1,
            subcommand: subcommand.to_string(),
            command,
            resolved_config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(".manifest.json.tmp");
        let final_path = dir.join("manifest.json");
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &final_path)?;
        Ok(final_path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(
            "eval",
            vec!["crft".into(), "eval".into()],
            serde_json::json!({"alpha": 0.05}),
            42,
        );
        let f = dir.path().join("x.bin");
        std::fs::write(&f, b"abc").unwrap();
        m.add_output(&f).unwrap();
        let p = m.write(dir.path()).unwrap();
        let loaded = RunManifest::load(&p).unwrap();
        assert_eq!(loaded.subcommand, "eval");
        assert_eq!(loaded.outputs.len(), 1);
        assert_eq!(
            loaded.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(!dir.path().join(".manifest.json.tmp").exists());
    }
}
