use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use distgeo::pipeline::StageTiming;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub timings: Vec<StageTiming>,
    /// File name (relative to the manifest) to lowercase hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub patch_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stitched_edges: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solver: Option<Value>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            timings: Vec::new(),
            outputs: BTreeMap::new(),
            patch_count: None,
            stitched_edges: None,
            solver: None,
        }
    }

    pub fn record(&mut self, dir: &Path, name: &str) -> std::io::Result<()> {
        let digest = sha256_file(&dir.join(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    /// Files whose digest no longer matches, with the reason.
    pub fn mismatches(&self, dir: &Path) -> Vec<(String, String)> {
        self.outputs
            .iter()
            .filter_map(|(name, want)| match sha256_file(&dir.join(name)) {
                Ok(got) if &got == want => None,
                Ok(got) => Some((name.clone(), format!("digest {got} != recorded {want}"))),
                Err(e) => Some((name.clone(), e.to_string())),
            })
            .collect()
    }
}
