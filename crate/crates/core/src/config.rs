//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are trimmed;
//! values are trimmed and kept verbatim. Later layers (for example CLI
//! flags) override earlier ones through [`KvConfig::set`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; `None` when the key is absent, an error when it is
    /// present but does not parse.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Rejects any key outside `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = KvConfig::parse("# comment\n lr = 0.001\n\nbatch_size=8\n").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.001));
        c.set("batch_size", "2");
        let mut b = 4usize;
        c.apply("batch_size", &mut b).unwrap();
        assert_eq!(b, 2);
        assert_eq!(c.get::<u32>("missing").unwrap(), None);
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a=1\na=2").is_err());
        assert!(KvConfig::parse("=3").is_err());
        let c = KvConfig::parse("lr=abc").unwrap();
        assert!(c.get::<f64>("lr").is_err());
        assert!(c.ensure_known(&["batch_size"]).is_err());
    }
}
