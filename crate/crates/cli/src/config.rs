//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected key=value, got '{line}'", k + 1)));
            };
            let key = normalize(key);
            if key.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", k + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize(key)).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => {
                v.parse().map(Some).map_err(|e| CliError::Config(format!("key '{key}': cannot parse '{v}': {e}")))
            }
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// `--d` values: `auto` or a nonnegative integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimArg {
    Auto,
    Fixed(usize),
}

impl FromStr for DimArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(DimArg::Auto)
        } else {
            s.parse().map(DimArg::Fixed).map_err(|_| format!("expected 'auto' or an integer, got '{s}'"))
        }
    }
}

/// Comma-separated list parser.
pub fn parse_list<T: FromStr>(s: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|e: T::Err| CliError::Config(format!("'{t}': {e}"))))
        .collect()
}
