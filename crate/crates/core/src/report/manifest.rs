use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::io_util::atomic_write;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!("circuitlab ", env!("CARGO_PKG_VERSION"));

/// Record of one command run, written as `manifest.json` in its output
/// directory. `config` holds the fully resolved options and can be passed
/// back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    /// Paths relative to the manifest's directory, sorted.
    pub outputs: Vec<String>,
    pub tool_version: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.into(),
            timings: BTreeMap::new(),
        }
    }

    /// Records `path` as an output, relative to `dir` when inside it.
    pub fn add_output(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
    }

    /// Writes `dir/manifest.json`, replacing any earlier manifest there.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs.sort();
        self.outputs.dedup();
        let path = dir.join(MANIFEST_NAME);
        let mut body = serde_json::to_vec_pretty(self)?;
        body.push(b'\n');
        atomic_write(&path, &body)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// The manifest without its timings, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}
