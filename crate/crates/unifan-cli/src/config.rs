//! Flat `key=value` run configuration: a config file plus command-line
//! overrides, with section prefixes by convention (`model.fan_in=32`).
//!
//! Every accessor records the key it touched; [`Config::finish`] then
//! rejects any key the active subcommand never consumed, so typos fail
//! loudly instead of silently running with defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use unifan::{Error, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn split_pair(text: &str) -> Option<(String, String)> {
    let (key, value) = text.split_once('=')?;
    let key = key.trim();
    if key.is_empty() {
        return None;
    }
    Some((key.to_string(), value.trim().to_string()))
}

impl Config {
    /// Reads `path` (if given) and then applies `overrides` (`key=value`
    /// strings, typically trailing CLI arguments), which replace file values.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = split_pair(line) else {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("expected key=value, got {line:?}"),
                    });
                };
                if values.insert(key.clone(), value).is_some() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("duplicate key {key:?}"),
                    });
                }
            }
        }
        for text in overrides {
            let Some((key, value)) = split_pair(text) else {
                return Err(Error::config(format!(
                    "override {text:?} is not of the form key=value"
                )));
            };
            values.insert(key, value);
        }
        Ok(Config {
            values,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    /// Forces a value, as when a flag like `--seed` outranks the file.
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    /// Raw lookup. Probing a key marks it as known whether or not it is set.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required key {key}")))
    }

    /// Parses the key if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::config(format!("bad value for {key}: {raw:?} ({e})"))
            }),
        }
    }

    /// Parses the key, falling back to `default` when absent.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn flag_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::config(format!(
                "bad value for {key}: {other:?} (expected true or false)"
            ))),
        }
    }

    pub fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// Comma-separated positive integers, e.g. `eval_ks=1,3,5`.
    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|_| {
                        Error::config(format!("bad value for {key}: {raw:?} (expected e.g. 1,3,5)"))
                    })
                })
                .collect(),
        }
    }

    /// Errors on any configured key this run never consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}
