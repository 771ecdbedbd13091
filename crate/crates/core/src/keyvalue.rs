//! `key = value` text files, shared by the calibration and run configuration
//! formats.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KeyValueError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("line {line}: key `{key}` has invalid value {value:?}")]
    Invalid {
        line: usize,
        key: String,
        value: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed `key = value` document. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, KeyValueError> {
        let mut entries = BTreeMap::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(KeyValueError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(KeyValueError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line))
                .is_some()
            {
                return Err(KeyValueError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, KeyValueError> {
        let text = std::fs::read_to_string(path).map_err(|source| KeyValueError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KeyValueError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((value, line)) => value.parse::<T>().map(Some).map_err(|_| KeyValueError::Invalid {
                line: *line,
                key: key.to_string(),
                value: value.clone(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KeyValueError> {
        self.get(key)?
            .ok_or_else(|| KeyValueError::Missing(key.to_string()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KeyValueError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        let line = self.entries.len() + 1;
        self.entries
            .insert(key.to_string(), (value.to_string(), line));
    }

    /// Serializes back to `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, (value, _)) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KeyValues::parse("# header\nfx = 1000\n\n  cy=400.5 # trailing\n").unwrap();
        assert_eq!(kv.require::<f64>("fx").unwrap(), 1000.0);
        assert_eq!(kv.require::<f64>("cy").unwrap(), 400.5);
        assert!(kv.get::<f64>("k1").unwrap().is_none());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            KeyValues::parse("fx 1000"),
            Err(KeyValueError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a = 1\na = 2"),
            Err(KeyValueError::Duplicate { line: 2, .. })
        ));
        let kv = KeyValues::parse("fx = abc").unwrap();
        assert!(matches!(
            kv.require::<f64>("fx"),
            Err(KeyValueError::Invalid { .. })
        ));
        assert!(matches!(
            kv.require::<f64>("fy"),
            Err(KeyValueError::Missing(_))
        ));
    }
}
