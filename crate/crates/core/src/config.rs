//! Flat `key=value` configuration files, shared by preset and training
//! configs. Lines starting with `#` are comments; whitespace around keys
//! and values is trimmed.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                idx + 1
            )))?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses the value under `key`; the key must be present.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key: {key}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}")))
    }

    /// Splits the entries into (keys listed in `keys`, everything else).
    pub fn partition(&self, keys: &[&str]) -> (KvConfig, KvConfig) {
        let mut matched = KvConfig::default();
        let mut rest = KvConfig::default();
        for (k, v) in &self.values {
            let target = if keys.contains(&k.as_str()) { &mut matched } else { &mut rest };
            target.values.insert(k.clone(), v.clone());
        }
        (matched, rest)
    }

    /// Parses the value under `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvConfig::parse_str("# comment\n a = 1 \n\nb=two\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        assert_eq!(kv.parse::<u32>("a").unwrap(), 1);
        assert!(kv.parse::<u32>("b").is_err());
        assert!(kv.parse::<u32>("missing").is_err());
        assert_eq!(kv.parse_opt::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(KvConfig::parse_str("just a line\n").is_err());
    }
}
