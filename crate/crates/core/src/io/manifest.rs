//! Run manifests: enough to reproduce an output (effective config, seeds,
//! input digests) and nothing that varies between identical runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// File name (inputs) or path relative to the output directory, so
    /// reruns into another directory compare equal.
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self {
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub data_provenance: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Record counts, e.g. images parsed and images excluded.
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
    pub config: PipelineConfig,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &PipelineConfig) -> Result<Self> {
        let text = config.to_toml()?;
        let seeds = BTreeMap::from([
            ("design".to_string(), config.design.seed),
            ("distill".to_string(), config.distill.seed),
            ("teacher".to_string(), config.teacher.seed),
            ("calibration".to_string(), config.calibration.seed),
            ("transfer".to_string(), config.transfer.seed),
            ("data".to_string(), config.data.seed),
            ("transfer_data".to_string(), config.transfer_data.seed),
        ]);
        Ok(Self {
            tool: "metaconv".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config_sha256: sha256_hex(text.as_bytes()),
            seed: config.seed,
            seeds,
            data_provenance: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            notes: Vec::new(),
            config: config.clone(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// `name` is the path relative to the output directory.
    pub fn output(&mut self, path: &Path, name: &str) -> Result<()> {
        let mut d = FileDigest::of(path)?;
        d.name = name.to_string();
        self.outputs.push(d);
        Ok(())
    }

    pub fn count(&mut self, key: &str, value: u64) {
        self.counts.insert(key.into(), value);
    }

    /// Written as `<dir>/<subcommand>.manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.subcommand));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
