//! Run manifests: a JSON record written next to a command's outputs once it succeeds.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const MANIFEST_FORMAT: &str = "flowpost-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, Failure> {
        let data = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
        Ok(Artifact { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&data)), bytes: data.len() as u64 })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub format: &'static str,
    pub version: u32,
    pub tool_version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

/// Collects a manifest while a command runs.
pub struct Recorder {
    command: String,
    started: Instant,
    threads: usize,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, threads: usize) -> Self {
        Recorder {
            command: command.into(),
            started: Instant::now(),
            threads,
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    }

    pub fn seed(&mut self, s: u64) {
        self.seeds.push(s);
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    /// Hashes every artifact and writes the manifest atomically to `path`.
    pub fn finish(self, path: &Path) -> Result<RunManifest, Failure> {
        let hash = |v: &[PathBuf]| v.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>, _>>();
        let m = RunManifest {
            format: MANIFEST_FORMAT,
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            threads: self.threads,
            config: self.config,
            seeds: self.seeds,
            inputs: hash(&self.inputs)?,
            outputs: hash(&self.outputs)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let body = serde_json::to_vec_pretty(&m).map_err(|e| Failure::Data(e.to_string()))?;
        write_atomic(path, &body)?;
        Ok(m)
    }
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, body: &[u8]) -> Result<(), Failure> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, body).map_err(|e| Failure::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
}

pub fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// `<path>.manifest.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
