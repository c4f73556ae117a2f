//! Artifact directory with a `manifest.json` listing what a run wrote.

use std::path::{Path, PathBuf};

use dense_ntp::targets::DenseMap;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const TOOL: &str = "dense-ntp";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    config: &'a Value,
    artifacts: Vec<&'a str>,
}

pub struct Run {
    dir: PathBuf,
    command: String,
    argv: Vec<String>,
    seed: u64,
    config: Value,
    artifacts: Vec<String>,
}

impl Run {
    pub fn create(dir: &Path, command: &str, argv: &[String], seed: u64, config: &impl Serialize) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            argv: argv.to_vec(),
            seed,
            config: serde_json::to_value(config)?,
            artifacts: Vec::new(),
        })
    }

    /// Registers `name` (relative, `/`-separated) and returns its path.
    fn claim(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.claim(name)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the PGM and its `.hdr` sidecar.
    pub fn write_pgm(&mut self, name: &str, map: &DenseMap) -> Result<(), CliError> {
        let path = self.claim(name)?;
        self.artifacts.push(format!("{name}.hdr"));
        dense_ntp::io::write_pgm(&path, map)?;
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut artifacts: Vec<&str> = self.artifacts.iter().map(String::as_str).collect();
        artifacts.sort_unstable();
        let manifest = Manifest {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            argv: &self.argv,
            seed: self.seed,
            config: &self.config,
            artifacts,
        };
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
