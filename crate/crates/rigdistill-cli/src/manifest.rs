//! Reproducibility record written next to every file output: the
//! subcommand, its inputs/outputs, and the fully resolved settings. The
//! content is deterministic so reruns are byte-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub seed: u64,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub resolved: serde_json::Value,
}

impl RunManifest {
    pub fn new(subcommand: &'static str, seed: u64) -> Self {
        RunManifest { subcommand, seed, inputs: Vec::new(), outputs: Vec::new(), resolved: serde_json::Value::Null }
    }

    pub fn input(mut self, name: &str, path: impl AsRef<Path>) -> Self {
        self.inputs.push((name.to_string(), path.as_ref().display().to_string()));
        self
    }

    pub fn output(mut self, path: impl AsRef<Path>) -> Self {
        self.outputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn resolved(mut self, value: serde_json::Value) -> Self {
        self.resolved = value;
        self
    }

    /// Write `<primary_output>.manifest.json`.
    pub fn write_next_to(&self, primary_output: &Path) -> std::io::Result<PathBuf> {
        let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary_output.with_file_name(name);
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, body)?;
        Ok(path)
    }
}
