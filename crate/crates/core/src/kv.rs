//! Minimal `key = value` text format used by manifests and config files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat; the
//! typed getters read the last occurrence, [`KvMap::all`] returns every one.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KvMap { entries })
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    pub fn all(&self, key: &str) -> Vec<&str> {
        self.entries.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.has(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Whitespace-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.str(key)?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
            .collect()
    }

    pub fn pair<T: FromStr>(&self, key: &str) -> Result<(T, T)> {
        let mut v = self.list::<T>(key)?;
        if v.len() != 2 {
            return Err(Error::Config(format!("{key}: expected two values")));
        }
        let b = v.pop().expect("two");
        let a = v.pop().expect("two");
        Ok((a, b))
    }
}

/// Builder for `key = value` text.
#[derive(Clone, Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str(&format!("# {text}\n"));
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    /// Floats use the shortest round-tripping representation.
    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.put(key, format!("{value:?}"))
    }

    pub fn floats(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let s: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        self.put(key, s.join(" "))
    }

    pub fn list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, s.join(" "))
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}
