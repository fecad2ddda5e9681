//! Line-oriented `key=value` text used by config files and the config block of
//! model files. `#` starts a comment line; keys are unique.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: cannot parse {value:?}: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: IndexMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if map.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(map)
    }

    /// Inserts or replaces a value.
    pub fn set(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| KvError::Value {
                key: key.to_string(),
                value: v.to_string(),
                message: e.to_string(),
            }),
        }
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, KvError>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|item| {
                item.trim().parse().map_err(|e: T::Err| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// Fails on the first key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), KvError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(KvError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }
}

impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Formats a list for [`KvMap::list`].
pub fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_lists_and_errors() {
        let m = KvMap::parse("# c\nmodel.width = 24\n\nmodel.input_kernels=3,5,7,11\n").unwrap();
        assert_eq!(m.parsed::<usize>("model.width").unwrap(), Some(24));
        assert_eq!(m.list::<usize>("model.input_kernels").unwrap(), Some(vec![3, 5, 7, 11]));
        assert_eq!(m.parsed::<usize>("missing").unwrap(), None);
        assert!(matches!(KvMap::parse("a=1\na=2"), Err(KvError::Syntax { line: 2, .. })));
        assert!(matches!(KvMap::parse("novalue"), Err(KvError::Syntax { line: 1, .. })));
        assert!(m.parsed::<usize>("model.input_kernels").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut m = KvMap::new();
        m.set("a", 1.5);
        m.set("b.c", "x,y");
        assert_eq!(KvMap::parse(&m.to_string()).unwrap(), m);
    }
}
