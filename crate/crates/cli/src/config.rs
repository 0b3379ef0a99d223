//! Flat `key = value` configuration files.
//!
//! Keys use the long flag names with either `-` or `_`; `#` starts a comment.
//! Flags given on the command line take precedence over file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    source: String,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::usage(format!("{source}:{}: expected `key = value`", no + 1)));
            };
            let key = normalize(k);
            if key.is_empty() {
                return Err(CliError::usage(format!("{source}:{}: empty key", no + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("{source}:{}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(ConfigFile {
            values,
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Removes and parses `key`; `None` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(&normalize(key)) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::usage(format!("{}: bad value `{v}` for `{key}`: {e}", self.source))),
        }
    }

    /// Errors on any key no consumer asked for.
    pub fn finish(self) -> CliResult<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::usage(format!("{}: unknown key `{k}`", self.source))),
        }
    }
}

/// Flag value if given, else the config value, else the current value.
pub fn merge<T: FromStr>(cfg: &mut ConfigFile, key: &str, flag: Option<T>, slot: &mut T) -> CliResult<()>
where
    T::Err: std::fmt::Display,
{
    let from_file = cfg.take::<T>(key)?;
    if let Some(v) = flag.or(from_file) {
        *slot = v;
    }
    Ok(())
}

/// Comma-separated list, e.g. `0,1,2`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|e| format!("`{x}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_both_separators() {
        let mut c = ConfigFile::parse("# sweep\nlr = 0.005\naug-rate=0.25 # inline\n\n", "t").unwrap();
        assert_eq!(c.take::<f64>("lr").unwrap(), Some(0.005));
        assert_eq!(c.take::<f64>("aug_rate").unwrap(), Some(0.25));
        assert_eq!(c.take::<f64>("alpha").unwrap(), None);
        c.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(ConfigFile::parse("lr 0.1", "t").is_err());
        assert!(ConfigFile::parse("lr = 1\nlr = 2", "t").is_err());
        let c = ConfigFile::parse("bogus = 1", "t").unwrap();
        assert!(c.finish().is_err());
        let mut c = ConfigFile::parse("epochs = many", "t").unwrap();
        assert!(c.take::<usize>("epochs").is_err());
    }

    #[test]
    fn flag_beats_file() {
        let mut c = ConfigFile::parse("beta = 0.1", "t").unwrap();
        let mut beta = 0.005;
        merge(&mut c, "beta", Some(0.2), &mut beta).unwrap();
        assert_eq!(beta, 0.2);
        let mut c = ConfigFile::parse("beta = 0.1", "t").unwrap();
        merge(&mut c, "beta", None, &mut beta).unwrap();
        assert_eq!(beta, 0.1);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<u64>("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_list::<u64>("1,x").is_err());
    }
}
