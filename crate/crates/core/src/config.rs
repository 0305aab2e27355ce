//! Flat `key = value` config files.
//!
//! ```text
//! # quadratic game, two states
//! model = quadratic
//! model.b = 4
//! method = dgme
//! dgme.iterations = 4000
//! seed = 7
//! ```
//!
//! Keys are dotted section paths; `#` starts a comment. Every key must be
//! consumed by the reader, so typos surface as errors from
//! [`KeyValues::finish`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(KeyValues {
            entries,
            consumed: BTreeSet::new(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_string(&mut self, key: &str) -> Result<String> {
        self.take_opt_string(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn take_opt_string(&mut self, key: &str) -> Option<String> {
        let value = self.entries.get(key).cloned()?;
        self.consumed.insert(key.to_string());
        Some(value)
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_opt_string(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key:?}: {v:?}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take_opt(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list_or<T: FromStr + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.take_opt_string(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| Error::Config(format!("bad list entry for {key:?}: {s:?}")))
                })
                .collect(),
        }
    }

    /// Marks every key under the given sections as read, for sections that
    /// belong to other subcommands.
    pub fn ignore_sections(&mut self, sections: &[&str]) {
        for key in self.entries.keys() {
            if sections.iter().any(|s| key.strip_prefix(s).is_some_and(|rest| rest.starts_with('.'))) {
                self.consumed.insert(key.clone());
            }
        }
    }

    /// Errors on any key that was never read.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {unknown:?}")))
        }
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`KeyValues::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
