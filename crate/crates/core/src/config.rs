//! Flat key=value run configuration.
//!
//! A config file holds one `key = value` pair per line, keys mirroring the
//! long command-line flag names of the subcommand it is passed to. Blank
//! lines and lines starting with `#` are skipped. Values on the command
//! line override the file; the file overrides built-in defaults. Keys the
//! subcommand does not define are rejected, as are duplicates, so a config
//! is always a faithful record of a run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Parsed key=value pairs. Consumers [`take`](KeyValues::take) the keys
/// they understand and then call [`reject_unknown`](KeyValues::reject_unknown).
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    pairs: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues> {
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(KeyValues { pairs })
    }

    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeyValues::parse(&text)
    }

    /// Removes and returns the raw value for `key`, if present.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key)
    }

    /// Removes and parses the value for `key`; parse failures name the key.
    pub fn take_parsed<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.pairs.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("key {key}: {e} (value {raw:?})"))),
        }
    }

    /// Errors if any pair was never taken, listing the stray keys.
    pub fn reject_unknown(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.pairs.keys().map(String::as_str).collect();
        Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Renders resolved settings back to the file syntax, in the given order,
/// so every run directory carries an exact reusable record.
pub fn render(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (key, value) in entries {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(value);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let kv = KeyValues::parse("# run record\n\ncount = 12\nscheme = lsq+:4\n  seed=7  \n").unwrap();
        let mut kv = kv;
        assert_eq!(kv.take("count").as_deref(), Some("12"));
        assert_eq!(kv.take("scheme").as_deref(), Some("lsq+:4"));
        assert_eq!(kv.take_parsed::<u64>("seed").unwrap(), Some(7));
        kv.reject_unknown().unwrap();
    }

    #[test]
    fn values_may_contain_equals_signs() {
        let mut kv = KeyValues::parse("note = a=b=c").unwrap();
        assert_eq!(kv.take("note").as_deref(), Some("a=b=c"));
    }

    #[test]
    fn missing_separator_is_rejected_with_line_number() {
        let err = KeyValues::parse("count = 3\nbogus line\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_and_empty_keys_are_rejected() {
        let err = KeyValues::parse("a = 1\na = 2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate key a"), "{err}");
        let err = KeyValues::parse(" = 2\n").unwrap_err().to_string();
        assert!(err.contains("empty key"), "{err}");
    }

    #[test]
    fn unknown_keys_are_listed() {
        let mut kv = KeyValues::parse("count = 3\ntypo = x\nother = y\n").unwrap();
        kv.take("count");
        let err = kv.reject_unknown().unwrap_err().to_string();
        assert!(err.contains("typo") && err.contains("other"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut kv = KeyValues::parse("count = many\n").unwrap();
        let err = kv.take_parsed::<u32>("count").unwrap_err().to_string();
        assert!(err.contains("key count") && err.contains("many"), "{err}");
    }

    #[test]
    fn render_round_trips_through_parse() {
        let entries = [("count", "12".to_string()), ("scheme", "lsq+:4".to_string())];
        let text = render(&entries);
        let mut kv = KeyValues::parse(&text).unwrap();
        assert_eq!(kv.take("count").as_deref(), Some("12"));
        assert_eq!(kv.take("scheme").as_deref(), Some("lsq+:4"));
        kv.reject_unknown().unwrap();
    }
}
