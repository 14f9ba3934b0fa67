//! Flat `key = value` configuration shared by all subcommands.
//!
//! ```text
//! # comments and blank lines are ignored
//! glossary = data/glossary.txt
//! embedding_endpoint = http://localhost:8080/embed
//! cutoff = 0.65
//! ```
//!
//! Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "glossary",
    "refkb",
    "embedder",
    "hash_dim",
    "embedding_endpoint",
    "embedding_model",
    "cutoff",
    "batch_size",
    "checkpoint_every",
    "max_chars",
    "seed",
    "jobs",
    "retry_attempts",
    "llm_endpoint",
    "model_endpoint",
    "judge_threshold",
    "in_flight",
    "user_agent",
    "politeness_delay_ms",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.into(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key = value".into()))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(parse_err(format!("unknown key {key:?}")));
            }
            if values.insert(key.to_owned(), value.trim().to_owned()).is_some() {
                return Err(parse_err(format!("{key} is set twice")));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(KEYS.contains(&key), "unregistered config key {key}");
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::invalid(format!("config {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    /// `flag` if given, else the file value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.parsed(key),
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
