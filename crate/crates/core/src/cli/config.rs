//! Flat `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; keys may be dotted
//! (`net.epochs = 300`). Later `--set key=value` overrides replace file
//! entries. Every key must be consumed by the command, so typos are
//! reported instead of silently ignored.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{EsmError, Result};

#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Line(usize),
    Override,
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

fn is_valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .split('.')
            .all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(EsmError::config(
                    format!("line {line_no}"),
                    format!("expected `key = value`, found {line:?}"),
                ));
            };
            let key = key.trim();
            if !is_valid_key(key) {
                return Err(EsmError::config(key, format!("line {line_no}: malformed key")));
            }
            if let Some(previous) = config.entries.get(key) {
                if let Origin::Line(first) = previous.origin {
                    return Err(EsmError::config(
                        key,
                        format!("line {line_no}: already set on line {first}"),
                    ));
                }
            }
            config.entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    origin: Origin::Line(line_no),
                },
            );
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EsmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(EsmError::config(
                assignment.trim(),
                "override must look like key=value",
            ));
        };
        let key = key.trim();
        if !is_valid_key(key) {
            return Err(EsmError::config(key, "malformed key in override"));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                origin: Origin::Override,
            },
        );
        Ok(())
    }

    /// Raw value of `key`, marking it consumed.
    pub fn raw(&self, key: &str) -> Option<&str> {
        let entry = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(entry.value.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(value) => value
                .parse::<T>()
                .map(Some)
                .map_err(|e| EsmError::config(key, format!("cannot parse {value:?}: {e}"))),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| EsmError::config(key, "required but not set"))
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(value) = self.raw(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(|item| {
                let item = item.trim();
                item.parse::<T>()
                    .map_err(|e| EsmError::config(key, format!("cannot parse list item {item:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Fails on the first key no getter asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            None => Ok(()),
            Some(key) => Err(EsmError::config(key.as_str(), "unknown key for this command")),
        }
    }

    /// Every entry after overrides, for manifests.
    pub fn effective(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }
}
