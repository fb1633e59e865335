//! Plain-text `key=value` files (simulation configs, schemas, run manifests).

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{MegaError, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| MegaError::Config(format!("line {}: expected key=value", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Ordered key=value map with typed accessors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in parse_key_values(text)? {
            if map.insert(k.clone(), v).is_some() {
                return Err(MegaError::Config(format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues { map })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.map
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| MegaError::Config(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    /// Comma-separated list; empty entries are dropped.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.map
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|_| MegaError::Config(format!("bad list item `{s}` for `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Canonical rendering, one `key=value` per line in key order.
    pub fn render(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists_and_comments() {
        let kv = KeyValues::parse("# c\nn = 10\nloadings=1, 0.8,1.2\n\n").unwrap();
        assert_eq!(kv.get::<usize>("n").unwrap(), Some(10));
        assert_eq!(kv.get_list::<f64>("loadings").unwrap(), Some(vec![1.0, 0.8, 1.2]));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("just text").is_err());
        let kv = KeyValues::parse("n=abc").unwrap();
        assert!(kv.get::<usize>("n").is_err());
    }
}
