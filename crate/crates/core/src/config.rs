//! Flat `key = value` text, used for config files and the model-config
//! header inside checkpoints.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parsed<V>(&self, key: &str) -> Result<Option<V>>
    where
        V: FromStr,
        V::Err: Display,
    {
        self.get(key).map(|raw| parse_value(key, raw)).transpose()
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Rejects the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_value<V>(key: &str, raw: &str) -> Result<V>
where
    V: FromStr,
    V::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("invalid value `{raw}` for `{key}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvFile::parse("# desk run\nsigma = 25\n\n  epochs=20  \n").unwrap();
        assert_eq!(kv.get("sigma"), Some("25"));
        assert_eq!(kv.parsed::<usize>("epochs").unwrap(), Some(20));
        assert_eq!(kv.parsed::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvFile::parse("a = 1\na = 2").is_err());
        assert!(KvFile::parse("no equals sign").is_err());
        assert!(KvFile::parse(" = 3").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let kv = KvFile::parse("sigma = 25\nsgima = 3").unwrap();
        let err = kv.check_known(&["sigma"]).unwrap_err();
        assert!(err.to_string().contains("`sgima`"));
    }

    #[test]
    fn bad_value_is_reported_with_key() {
        let kv = KvFile::parse("epochs = many").unwrap();
        let err = kv.parsed::<usize>("epochs").unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }
}
