//! Versioned `key = value` text documents used for archive configs and run manifests.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::dataio::dataset::hex;
use crate::error::{Error, Result};

/// First line is a version header; then one `key = value` per line. `#` starts a comment line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvDoc {
    header: String,
    entries: IndexMap<String, String>,
}

impl KvDoc {
    pub fn new(header: impl Into<String>) -> Self {
        KvDoc { header: header.into(), entries: IndexMap::new() }
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    /// Insert or replace; keeps first-insertion order.
    pub fn set(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'));
        self.entries.insert(key.into(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn parse<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    /// Comma-separated list value.
    pub fn parse_list<V: FromStr>(&self, key: &str) -> Result<Vec<V>>
    where
        V::Err: Display,
    {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{p}`: {e}")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.header);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 of the rendered document.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }

    pub fn parse_text(text: &str, expected_header: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        if header != expected_header {
            return Err(Error::Version { found: header.to_string(), expected: expected_header.to_string() });
        }
        let mut doc = KvDoc::new(header);
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 2)))?;
            let k = k.trim();
            if doc.entries.contains_key(k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 2)));
            }
            doc.set(k, v.trim());
        }
        Ok(doc)
    }

    pub fn read(path: impl AsRef<Path>, expected_header: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, expected_header)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Join values with commas, the list form read by [`KvDoc::parse_list`].
pub fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
