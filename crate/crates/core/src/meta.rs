//! Provenance sidecars written next to every output file as `<file>.meta.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub embedder: Option<String>,
    /// Effective configuration after flag overrides.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(command: impl Into<String>) -> Self {
        Metadata {
            tool: "orepipe".into(),
            version: crate::VERSION.into(),
            command: command.into(),
            seed: None,
            embedder: None,
            config: BTreeMap::new(),
        }
    }
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

pub fn write_sidecar(output: &Path, meta: &Metadata) -> Result<()> {
    let path = sidecar_path(output);
    let body = serde_json::to_string_pretty(meta)? + "\n";
    std::fs::write(&path, body).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(output: &Path) -> Result<Option<Metadata>> {
    let path = sidecar_path(output);
    match std::fs::read_to_string(&path) {
        Ok(body) => Ok(Some(serde_json::from_str(&body)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}
