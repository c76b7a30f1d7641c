//! Versioned JSON checkpoint container: architecture descriptors, named
//! parameter arrays and a SHA-256 checksum over the content.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Layer, Net, ParamStore};

pub const FORMAT: &str = "flowguide-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedNet {
    pub name: String,
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

impl NamedNet {
    pub fn new(name: &str, net: &Net) -> Self {
        Self {
            name: name.to_string(),
            input_dim: net.input_dim,
            layers: net.layers.clone(),
            params: net.params.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBody {
    pub kind: String,
    pub metadata: BTreeMap<String, Value>,
    pub networks: Vec<NamedNet>,
}

impl CheckpointBody {
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint body serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub checksum: String,
    #[serde(flatten)]
    pub body: CheckpointBody,
}

impl Checkpoint {
    pub fn new(kind: &str, metadata: BTreeMap<String, Value>, networks: Vec<NamedNet>) -> Self {
        let body = CheckpointBody { kind: kind.to_string(), metadata, networks };
        Self { format: FORMAT.to_string(), version: VERSION, checksum: body.checksum(), body }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Reads and verifies a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&text)?;
        if ck.format != FORMAT {
            return Err(Error::Unsupported(format!("format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Unsupported(format!("version {}", ck.version)));
        }
        let computed = ck.body.checksum();
        if computed != ck.checksum {
            return Err(Error::Checksum { stored: ck.checksum, computed });
        }
        Ok(ck)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.body.kind == kind {
            Ok(())
        } else {
            Err(Error::Unsupported(format!("expected a {kind} checkpoint, found {}", self.body.kind)))
        }
    }

    pub fn network(&self, name: &str) -> Result<Net> {
        let n = self
            .body
            .networks
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Unsupported(format!("checkpoint has no network {name:?}")))?;
        Net::from_parts(n.input_dim, n.layers.clone(), n.params.clone())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .body
            .metadata
            .get(key)
            .ok_or_else(|| Error::Unsupported(format!("checkpoint metadata lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Helper for building metadata maps.
pub fn meta_entry(key: &str, value: impl Serialize) -> (String, Value) {
    (key.to_string(), serde_json::to_value(value).expect("metadata serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;

    fn sample() -> Checkpoint {
        let net = Net::new(3, vec![Layer::Dense { input: 3, output: 2 }, Layer::Tanh], 11).unwrap();
        Checkpoint::new("test", BTreeMap::from([meta_entry("answer", 42)]), vec![NamedNet::new("main", &net)])
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta::<i32>("answer").unwrap(), 42);
        assert_eq!(back.network("main").unwrap().params, ck.network("main").unwrap().params);
    }

    #[test]
    fn tampered_content_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut ck = sample();
        ck.body.networks[0].params.params[0].values[0] += 1.0;
        ck.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_layer_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let text = serde_json::to_string(&sample()).unwrap().replace("\"tanh\"", "\"gelu\"");
        std::fs::write(&p, text).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
