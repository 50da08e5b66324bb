//! `report.json`: the resolved config, seeds and artifact hashes of a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct RunReport<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub seeds: Value,
    /// File name relative to the output directory -> SHA-256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(flatten)]
    pub details: Value,
}

/// Hash `artifacts` (paths inside `dir`) and write `dir/report.json`.
pub fn write_report(dir: &Path, command: &str, config: &RunConfig, artifacts: &[PathBuf], details: Value) -> Result<PathBuf> {
    let mut hashes = BTreeMap::new();
    for path in artifacts {
        let name = path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned();
        hashes.insert(name, sha256_file(path)?);
    }
    let report = RunReport {
        command,
        config,
        seeds: config.seeds(),
        artifacts: hashes,
        details,
    };
    let path = dir.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
