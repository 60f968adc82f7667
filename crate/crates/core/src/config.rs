//! Flat `key=value` documents used for run configs and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// keys and values are trimmed.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate { line: idx + 1, key });
        }
    }
    Ok(out)
}

/// Renders entries as `key=value` lines in the given order.
pub fn render_kv(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses one value, naming the key on failure.
pub fn parse_value<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Parses a comma-separated list.
pub fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// A parameter set that can be read from and written to key=value form.
pub trait KvConfig {
    /// Applies one entry. Returns `Ok(false)` if the key is not recognised.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;
    fn entries(&self) -> Vec<(String, String)>;

    /// Applies every entry, rejecting unknown keys.
    fn apply_all(&mut self, map: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in map {
            if !self.set(k, v)? {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = parse_kv("# header\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(parse_kv("a=1\nnope"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse_kv("a=1\na=2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_kv("=2"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn value_errors_name_the_key() {
        let e = parse_value::<usize>("steps", "ten").unwrap_err();
        assert!(e.to_string().contains("steps"));
        assert_eq!(parse_list::<usize>("dims", "64, 32").unwrap(), vec![64, 32]);
        assert_eq!(join_list(&[1, 2]), "1,2");
    }
}
