//! Run manifests: enough resolved state to replay any run bitwise.
//!
//! Every subcommand writes one next to its outputs. The stored config has
//! all defaults materialized, so a rerun ignores current defaults and the
//! outputs (manifest itself excluded — it carries wall-clock time) come
//! out byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved subcommand config (defaults materialized).
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input paths by role, e.g. "data" or "bias-model".
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        })
    }

    pub fn input(mut self, role: &str, path: impl Into<PathBuf>) -> Self {
        self.inputs.insert(role.to_string(), path.into());
        self
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    /// Deserializes the stored config back into its concrete type.
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
