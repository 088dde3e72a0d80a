//! Run manifests: command line, config hash, seeds and file digests written
//! beside every output so runs can be replayed and compared.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub tool_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
}

impl RunManifest {
    /// `config` is any canonical serialization of the effective settings.
    pub fn new(command_line: Vec<String>, config: &str) -> Self {
        Self {
            command_line,
            config_hash: sha256_bytes(config.as_bytes()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Records an input file under `label` (usually the path as given).
    pub fn add_input(&mut self, label: &str, path: impl AsRef<Path>) -> Result<()> {
        self.input_digests.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, label: &str, path: impl AsRef<Path>) -> Result<()> {
        self.output_digests.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// `<output>.manifest.json`.
    pub fn path_for(output: impl AsRef<Path>) -> PathBuf {
        let out = output.as_ref();
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    pub fn write_beside(&self, output: impl AsRef<Path>) -> Result<PathBuf> {
        let path = Self::path_for(output);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Output labels whose current digest (resolved against `base`) differs from the record.
    pub fn mismatched_outputs(&self, base: impl AsRef<Path>) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (label, digest) in &self.output_digests {
            let path = base.as_ref().join(label);
            if !path.exists() || &sha256_file(&path)? != digest {
                bad.push(label.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_beside_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.freq");
        std::fs::write(&out, "abc").unwrap();
        let mut m = RunManifest::new(vec!["profile".into()], "{}").seed("seed", 3);
        m.add_output("x.freq", &out).unwrap();
        let p = m.write_beside(&out).unwrap();
        assert_eq!(p.file_name().unwrap(), "x.freq.manifest.json");
        let back = RunManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert!(back.mismatched_outputs(dir.path()).unwrap().is_empty());
        std::fs::write(&out, "abd").unwrap();
        assert_eq!(back.mismatched_outputs(dir.path()).unwrap(), vec!["x.freq".to_string()]);
        assert_eq!(
            m.output_digests["x.freq"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
