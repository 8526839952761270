use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const OUTPUT_ROOT_VAR: &str = "OSHP_OUTPUT_ROOT";

/// Resolves a relative output path against `$OSHP_OUTPUT_ROOT`.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// `foo/bar.csv` → `foo/bar.csv.run.json`.
pub fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

/// What a command ran with.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn with_input(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.inputs.insert(key.into(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
