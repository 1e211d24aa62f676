//! Run configuration echoed into every artifact, with a content checksum.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input and output paths, as given on the command line.
    #[serde(default)]
    pub paths: BTreeMap<String, String>,
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    /// Config checksums of the artifacts this run consumed.
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            ..Default::default()
        }
    }

    pub fn path(mut self, key: &str, path: &Path) -> Self {
        self.paths.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn backend(mut self, key: &str, name: &str) -> Self {
        self.backends.insert(key.to_string(), name.to_string());
        self
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.params.insert(key.to_string(), v);
        self
    }

    pub fn upstream(mut self, key: &str, checksum: &str) -> Self {
        self.upstream.insert(key.to_string(), checksum.to_string());
        self
    }

    /// SHA-256 over the canonical (key-sorted, compact) JSON encoding.
    pub fn checksum(&self) -> String {
        json_checksum(&serde_json::to_value(self).unwrap_or(Value::Null))
    }
}

pub fn json_checksum(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(bytes))
}

/// A JSON artifact: the producing config, its checksum and the payload
/// fields at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config: RunConfig,
    pub config_checksum: String,
    #[serde(flatten)]
    pub data: T,
}

impl<T: Serialize + DeserializeOwned> Envelope<T> {
    pub fn new(config: RunConfig, data: T) -> Self {
        Envelope {
            config_checksum: config.checksum(),
            config,
            data,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let env: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        if env.config.checksum() != env.config_checksum {
            return Err(Error::Artifact(format!(
                "{}: config checksum mismatch",
                path.display()
            )));
        }
        Ok(env)
    }
}

/// Sidecar path for outputs that cannot carry their own config (CSV, JSONL).
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {}

pub fn write_sidecar(out: &Path, config: RunConfig) -> Result<()> {
    Envelope::new(config, Sidecar {}).write(&sidecar_path(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Payload {
        values: Vec<u32>,
    }

    #[test]
    fn checksum_is_stable_and_sensitive() {
        let a = RunConfig::new("split").param("ratios", [0.8, 0.1, 0.1]);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.seed = Some(1);
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn envelope_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let env = Envelope::new(RunConfig::new("x"), Payload { values: vec![1, 2] });
        env.write(&path).unwrap();
        let back: Envelope<Payload> = Envelope::read(&path).unwrap();
        assert_eq!(back, env);
        let text = fs::read_to_string(&path).unwrap().replace("\"x\"", "\"y\"");
        fs::write(&path, text).unwrap();
        assert!(Envelope::<Payload>::read(&path).is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/r.csv")), PathBuf::from("out/r.csv.config.json"));
    }
}
