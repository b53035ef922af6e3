//! Run manifest: every subcommand drops one `run_manifest.json` into its
//! output directory recording what ran, with which inputs, and what came out.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdl_core::hash::sha256_hex;
use cdl_core::{CdlError, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    /// Fully resolved settings the run actually used.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub checkpoint_sha256: Option<String>,
    pub wall_clock_secs: f64,
    /// Command-specific payload (counterfactual targets, summary metrics).
    pub extra: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_sha256: None,
            wall_clock_secs: 0.0,
            extra: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Records an output path relative to the run's output directory.
    pub fn output(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    pub fn hash_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.checkpoint_sha256 = Some(sha256_hex(&bytes));
        Ok(())
    }

    /// Serializes to `<out_dir>/run_manifest.json`, stamping the elapsed time.
    pub fn write(mut self, out_dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        self.outputs.push("run_manifest.json".to_string());
        self.outputs.sort();
        self.outputs.dedup();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CdlError::Format(format!("manifest serialization: {e}")))?;
        let path = out_dir.join("run_manifest.json");
        fs::write(&path, text)?;
        Ok(path)
    }
}
