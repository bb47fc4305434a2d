//! Flat `key=value` text: config files, corpus manifests, checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// whitespace around keys and values is trimmed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            map.insert(k.trim(), v.trim());
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.insert(k, v);
        }
    }

    /// Reads `key` if present, leaving `slot` untouched otherwise.
    pub fn read_into<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(raw) = self.get(key) {
            *slot = raw
                .parse()
                .map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        }
        Ok(())
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        raw.parse().map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
    }

    /// Sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = KvMap::parse("# comment\n b = 2\n\na=x y\n").unwrap();
        assert_eq!(m.get("a"), Some("x y"));
        assert_eq!(m.require::<u32>("b").unwrap(), 2);
        assert_eq!(m.render(), "a=x y\nb=2\n");
        assert!(KvMap::parse("novalue").is_err());
        assert!(m.require::<u32>("a").is_err());
    }
}
