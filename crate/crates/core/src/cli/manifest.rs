use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to rerun a command: resolved configuration, seeds, and
/// hashes of what was read and written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub duration_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// `dir/stem.run.json` for an output `dir/stem.ext`.
pub fn run_manifest_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.run.json"))
}

pub(crate) struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    started: Instant,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: &[String]) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            args: args.to_vec(),
            started: Instant::now(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, config: serde_json::Value) -> &mut Self {
        self.config = config;
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn write(&self, path: &Path) -> Result<RunManifest> {
        let records = |paths: &[PathBuf]| -> Result<Vec<FileRecord>> {
            paths.iter().map(|p| FileRecord::of(p)).collect()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            args: self.args.clone(),
            version: VERSION.to_string(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            inputs: records(&self.inputs)?,
            outputs: records(&self.outputs)?,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
