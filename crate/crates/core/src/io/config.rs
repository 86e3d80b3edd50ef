//! Minimal INI-style run configuration:
//!
//! ```text
//! # comment
//! [train]
//! lr = 1e-4
//! iterations = 200
//! ```
//!
//! Keys before the first header belong to the unnamed section `""`. Callers
//! pull the keys they understand out of each section and then call
//! [`Section::finish`], which rejects anything left over.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    /// Removes and parses `key`, returning `None` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| {
                Error::Config(format!("line {line}: bad value {raw:?} for {}: {e}", self.qualified(key)))
            }),
        }
    }

    /// Removes a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, raw)) = self.entries.remove(key) else {
            return Ok(None);
        };
        let raw = raw.trim_start_matches('[').trim_end_matches(']');
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e| {
                    Error::Config(format!("line {line}: bad list item {s:?} for {}: {e}", self.qualified(key)))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config(format!(
                "line {line}: unknown key {}",
                self.qualified(key)
            ))),
        }
    }

    fn qualified(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, Section>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        let mut current = String::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                current = name.to_string();
                sections.entry(current.clone()).or_insert_with(|| Section {
                    name: current.clone(),
                    ..Section::default()
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let section = sections.entry(current.clone()).or_insert_with(|| Section {
                name: current.clone(),
                ..Section::default()
            });
            if section.entries.insert(key.to_string(), (lineno, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key {}", section.qualified(key))));
            }
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes a section, yielding an empty one when absent.
    pub fn section(&mut self, name: &str) -> Section {
        self.sections.remove(name).unwrap_or_else(|| Section {
            name: name.to_string(),
            ..Section::default()
        })
    }

    /// Fails on any section nobody consumed.
    pub fn finish(self) -> Result<()> {
        for (name, s) in self.sections {
            if name.is_empty() || !s.is_empty() {
                s.finish()?;
            }
            if !name.is_empty() {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        Ok(())
    }
}
