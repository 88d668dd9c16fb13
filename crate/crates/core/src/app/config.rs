//! Flat `key = value` configuration files with `#` comments.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    entries: Vec<(String, String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got {body:?}") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Parse { line, msg: format!("invalid key {k:?}") });
            }
            if let Some((_, _, first)) = entries.iter().find(|e| e.0 == k) {
                return Err(Error::Parse { line, msg: format!("duplicate key {k} (first set on line {first})") });
            }
            entries.push((k.to_string(), v.to_string(), line));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader { file: self, used: HashSet::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Typed access that remembers which keys were consumed.
pub struct ConfigReader<'a> {
    file: &'a ConfigFile,
    used: HashSet<&'a str>,
}

impl<'a> ConfigReader<'a> {
    /// Parsed value of `key`, or `None` when absent.
    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some((k, v, line)) = self.file.entries.iter().find(|e| e.0 == key) else {
            return Ok(None);
        };
        self.used.insert(k.as_str());
        v.parse::<T>()
            .map(Some)
            .map_err(|e| Error::Config(format!("line {line}: {key} = {v:?}: {e}")))
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.file.entries.iter().find(|e| !self.used.contains(e.0.as_str())) {
            Some((k, _, line)) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = ConfigFile::parse("# header\nepochs = 30  # inline\n\n lr=1e-3\nname = a b\n").unwrap();
        let mut r = c.reader();
        assert_eq!(r.get::<usize>("epochs").unwrap(), Some(30));
        assert_eq!(r.get::<f64>("lr").unwrap(), Some(1e-3));
        let mut s = String::new();
        r.set("name", &mut s).unwrap();
        assert_eq!(s, "a b");
        assert_eq!(r.get::<f64>("absent").unwrap(), None);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_error() {
        let c = ConfigFile::parse("epochs = 3\nbogus = 1\n").unwrap();
        let mut r = c.reader();
        r.get::<usize>("epochs").unwrap();
        let e = r.finish().unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("bogus") && m.contains("line 2")), "{e}");
    }

    #[test]
    fn syntax_errors_carry_lines() {
        assert!(matches!(ConfigFile::parse("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ConfigFile::parse("a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
        let c = ConfigFile::parse("epochs = many").unwrap();
        assert!(matches!(c.reader().get::<usize>("epochs"), Err(Error::Config(_))));
    }
}
