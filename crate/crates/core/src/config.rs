//! Flat `key = value` configuration with command-line overrides.
//!
//! Files are UTF-8, one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Keys are case-sensitive and `_` is treated
//! as `-`, so `samples_per_class` and `samples-per-class` are the same key.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{io_err, Error, Result};

/// Parsed configuration entries in insertion order. Later entries override
/// earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: IndexMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            let k = normalize_key(k);
            if k.is_empty() {
                return Err(Error::Usage(format!("config line {}: empty key", i + 1)));
            }
            kv.set(&k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(normalize_key(key), value.into());
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    /// Parses `key` if present; an unparseable value is a usage error naming
    /// the key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Usage(format!("--{key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Usage(format!("missing required --{key}")))
    }

    /// Rejects any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::Usage(format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Renders as `key = value` lines, parseable by [`KeyValues::parse`].
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_overrides() {
        let mut kv = KeyValues::parse("# header\nepochs = 30  # trailing\n\nsamples_per_class=100\nepochs = 5\n").unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(5));
        assert_eq!(kv.get::<usize>("samples-per-class").unwrap(), Some(100));
        kv.set("epochs", "7");
        assert_eq!(kv.require::<usize>("epochs").unwrap(), 7);
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn errors_name_the_key() {
        let kv = KeyValues::parse("epochs = many").unwrap();
        let e = kv.get::<usize>("epochs").unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
        let e = kv.check_known(&["seed"]).unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
        assert!(matches!(KeyValues::parse("no equals sign"), Err(Error::Usage(_))));
        assert!(matches!(kv.require::<u64>("seed"), Err(Error::Usage(_))));
    }
}
