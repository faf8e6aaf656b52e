//! `key = value` text files with `#` comments, shared by configs, manifests
//! and synthetic-dataset specs.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Reads entries and rejects keys nobody asked for.
#[derive(Debug)]
pub struct KvReader {
    origin: String,
    entries: Vec<Entry>,
    used: Vec<bool>,
}

impl KvReader {
    /// Splits `text` into entries. Blank lines and text after `#` are ignored.
    pub fn parse(text: &str, origin: impl Into<String>) -> Result<Self> {
        let origin = origin.into();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{origin}:{}: expected `key = value`, got {line:?}",
                    i + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::config(format!(
                    "{origin}:{}: invalid key {key:?}",
                    i + 1
                )));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: i + 1,
            });
        }
        let used = vec![false; entries.len()];
        Ok(KvReader {
            origin,
            entries,
            used,
        })
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// The single value for `key`; an empty value counts as absent.
    pub fn raw(&mut self, key: &str) -> Result<Option<(String, usize)>> {
        let mut found = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key {
                if let Some((_, first)) = found {
                    return Err(Error::config(format!(
                        "{}:{}: duplicate key {key:?} (first set on line {first})",
                        self.origin, e.line
                    )));
                }
                self.used[i] = true;
                found = Some((e.value.clone(), e.line));
            }
        }
        Ok(found.filter(|(v, _)| !v.is_empty()))
    }

    pub fn get<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key)? {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| {
                Error::config(format!(
                    "{}:{line}: bad value {v:?} for {key}: {e}",
                    self.origin
                ))
            }),
        }
    }

    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("{}: missing mandatory key {key:?}", self.origin)))
    }

    /// Comma-separated list for `key`.
    pub fn list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((v, line)) = self.raw(key)? else {
            return Ok(None);
        };
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse::<T>().map_err(|e| {
                    Error::config(format!(
                        "{}:{line}: bad list item {item:?} for {key}: {e}",
                        self.origin
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Three comma-separated numbers, e.g. per-channel statistics.
    pub fn triple(&mut self, key: &str) -> Result<Option<[f64; 3]>> {
        match self.list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            Some(v) => Err(Error::config(format!(
                "{}: {key} needs 3 values, got {}",
                self.origin,
                v.len()
            ))),
        }
    }

    /// Every value of a key that may repeat.
    pub fn all(&mut self, key: &str) -> Vec<Entry> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key {
                self.used[i] = true;
                out.push(e.clone());
            }
        }
        out
    }

    /// Fails on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        match self
            .entries
            .iter()
            .zip(&self.used)
            .find(|(_, used)| !**used)
        {
            None => Ok(()),
            Some((e, _)) => Err(Error::config(format!(
                "{}:{}: unknown key {:?}",
                self.origin, e.line, e.key
            ))),
        }
    }
}

/// Parses `true/false/yes/no/on/off/1/0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flag(pub bool);

impl FromStr for Flag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(Flag(true)),
            "false" | "no" | "off" | "0" => Ok(Flag(false)),
            _ => Err("expected a boolean".into()),
        }
    }
}
