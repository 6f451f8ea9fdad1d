//! Flat `key = value` config files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys must be known to the target config and may appear at most once.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed assignments in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::validation(format!("line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::validation(format!("duplicate key {key:?}")));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Config types that can be assigned field-by-field from text.
pub trait FlatConfig: Default + Sized {
    /// Sets one field; unknown keys are an error naming the key.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Canonical rendering, one `key = value` line per field in declaration
    /// order. Parsing this text reproduces the config exactly.
    fn to_text(&self) -> String;

    fn validate(&self) -> Result<()>;

    /// Defaults overridden by the assignments in `text`, then validated.
    fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in KeyValues::parse(text)?.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("invalid value {value:?} for key {key:?}")))
}

pub(crate) fn unknown_key(key: &str) -> Error {
    Error::validation(format!("unknown config key {key:?}"))
}

/// Shortest decimal that parses back to the same `f64`.
pub(crate) fn fmt_exact(v: f64) -> String {
    format!("{v:?}")
}
