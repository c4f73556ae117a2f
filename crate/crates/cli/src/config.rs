//! TOML run configuration layered under command-line flags.
//!
//! A config file holds the invoked subcommand's keys at top level plus the
//! global `seed` and `out`; model commands also accept an `[experiment]`
//! table. Unknown keys are usage errors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
}

pub fn load(path: Option<&Path>) -> Result<toml::Table, CliError> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Pulls `seed` and `out` out of the table; flags win.
pub fn globals(table: &mut toml::Table, seed: Option<u64>, out: Option<PathBuf>, command: &str) -> Result<Globals, CliError> {
    let file_seed = match table.remove("seed") {
        None => None,
        Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
        Some(v) => return Err(CliError::Usage(format!("config key `seed` must be a non-negative integer, got {v}"))),
    };
    let file_out = match table.remove("out") {
        None => None,
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(CliError::Usage(format!("config key `out` must be a string, got {v}"))),
    };
    Ok(Globals {
        seed: seed.or(file_seed).unwrap_or(0),
        out: out.or(file_out).unwrap_or_else(|| Path::new("dense-ntp-out").join(command)),
    })
}

/// Overlays the flags that were given onto the config table.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, table: toml::Table) -> Result<T, CliError> {
    let usage = |e: serde_json::Error| CliError::Usage(format!("config: {e}"));
    let mut merged = serde_json::to_value(table)?;
    // surface unknown or mistyped config keys before flags can mask them
    serde_json::from_value::<T>(merged.clone()).map_err(usage)?;
    if let (Value::Object(m), Value::Object(f)) = (&mut merged, serde_json::to_value(flags)?) {
        for (k, v) in f {
            if !v.is_null() {
                m.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(usage)
}
