//! Run manifests: one JSON file per command invocation, written next to the
//! primary output.
//!
//! The manifest records everything needed to reproduce the run bit-exactly:
//! the full command line, the effective config snapshot, and all seeds.
//! Re-running the recorded command line reproduces every output byte for
//! byte; the manifest itself is the only artifact that varies (wall-clock
//! duration).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::commands::CliError;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
    pub duration_ms: u128,
}

/// Collects manifest fields over the lifetime of one command.
pub struct ManifestBuilder {
    started: Instant,
    command: Vec<String>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: serde_json::Value,
}

impl ManifestBuilder {
    pub fn new(argv: &[String]) -> Self {
        Self {
            started: Instant::now(),
            command: argv.to_vec(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn config(&mut self, value: serde_json::Value) {
        self.config = value;
    }

    /// Writes `<primary>.manifest.json`.
    pub fn write(self, primary_output: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "depthflow",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            config: self.config,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let path = manifest_path(primary_output);
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, body + "\n")
            .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
    }
}

pub fn manifest_path(primary_output: &Path) -> std::path::PathBuf {
    let mut s = primary_output.as_os_str().to_os_string();
    s.push(".manifest.json");
    std::path::PathBuf::from(s)
}
