//! Command manifests: enough to replay an invocation and audit its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rlvr_core::taskgen::io::file_hash;
use rlvr_core::trainer::version_string;
use rlvr_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub version: String,
    pub timestamp_unix: u64,
    pub threads: usize,
    /// Effective configuration after merging flags, file and defaults.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

impl Invocation {
    pub fn new(command: &str, argv: &[String], threads: usize) -> Self {
        Invocation {
            command: command.to_string(),
            argv: argv.to_vec(),
            cwd: std::env::current_dir().unwrap_or_default(),
            version: version_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            threads,
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }
}

/// `<path>.manifest.json`, the sidecar next to a single-file artifact.
pub fn sidecar(path: &Path) -> PathBuf {
    rlvr_core::taskgen::io::manifest_path(path)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Finds the invocation record in any manifest this tool writes.
pub fn read_invocation(path: &Path) -> Result<Invocation> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)?;
    let inv = v
        .get("invocation")
        .cloned()
        .ok_or_else(|| Error::config(format!("{} has no invocation record", path.display())))?;
    Ok(serde_json::from_value(inv)?)
}
