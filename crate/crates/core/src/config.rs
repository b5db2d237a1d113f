//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Values
//! are consumed with the `take*` methods; [`KvConfig::finish`] rejects any key
//! nobody asked for, naming the line it came from.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    /// 1-based source line; 0 for command-line overrides.
    line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    source: Option<PathBuf>,
    entries: Vec<Entry>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_inner(text, None)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_inner(&text, Some(path.to_path_buf()))
    }

    fn parse_inner(text: &str, source: Option<PathBuf>) -> Result<Self> {
        let mut cfg = KvConfig {
            source,
            entries: Vec::new(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(cfg.parse_error(line, format!("expected `key = value`, got `{content}`")));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(cfg.parse_error(line, "empty key".to_string()));
            }
            if cfg.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config {
                    key: key.to_string(),
                    line,
                    msg: "duplicate key".into(),
                });
            }
            cfg.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(cfg)
    }

    fn parse_error(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.source.clone().unwrap_or_else(|| PathBuf::from("<config>")),
            line,
            msg,
        }
    }

    /// Apply a `key=value` override, replacing any value read from file.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config {
                key: assignment.to_string(),
                line: 0,
                msg: "override must look like key=value".into(),
            });
        };
        self.set(key.trim(), value.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => {
                e.value = value;
                e.line = 0;
            }
            None => self.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    fn take_entry(&mut self, key: &str) -> Option<Entry> {
        let pos = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(pos))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(entry) = self.take_entry(key) else {
            return Ok(None);
        };
        entry.value.parse::<T>().map(Some).map_err(|e| Error::Config {
            key: entry.key.clone(),
            line: entry.line,
            msg: format!("cannot parse `{}`: {e}", entry.value),
        })
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?.ok_or_else(|| Error::Config {
            key: key.to_string(),
            line: 0,
            msg: "required key is missing".into(),
        })
    }

    /// Comma-separated list. An empty value yields an empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(entry) = self.take_entry(key) else {
            return Ok(None);
        };
        entry
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| Error::Config {
                    key: entry.key.clone(),
                    line: entry.line,
                    msg: format!("cannot parse list item `{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key that was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some(e) => Err(Error::Config {
                key: e.key,
                line: e.line,
                msg: "unknown key".into(),
            }),
        }
    }
}

/// Render pairs in the same format [`KvConfig::parse`] reads.
pub fn write_kv<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
