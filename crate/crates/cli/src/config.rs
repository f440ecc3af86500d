//! Flat `key = value` configuration files. Keys match long flag names;
//! command-line values win over file values, which win over defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
    /// Relative paths in the file resolve against its directory.
    base: PathBuf,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = HashMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", k + 1)))?;
            let key = key.trim().replace('_', "-");
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", k + 1)));
            }
        }
        Ok(Self { values, base: PathBuf::new() })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, cli: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if cli.is_some() {
            return Ok(cli);
        }
        self.raw(key)
            .map(|s| s.parse::<T>().map_err(|e| CliError::Config(format!("{key} = {s:?}: {e}"))))
            .transpose()
    }

    pub fn or<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(cli, key)?.unwrap_or(default))
    }

    pub fn flag(&self, cli: bool, key: &str) -> CliResult<bool> {
        if cli {
            return Ok(true);
        }
        self.or(None, key, false)
    }

    pub fn path(&self, cli: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        cli.or_else(|| self.raw(key).map(|s| self.base.join(s)))
    }

    pub fn required_path(&self, cli: Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        let p = self
            .path(cli, key)
            .ok_or_else(|| CliError::Config(format!("--{key} is required")))?;
        if !p.exists() {
            return Err(CliError::Io {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            });
        }
        Ok(p)
    }

    pub fn optional_path(&self, cli: Option<PathBuf>, key: &str) -> CliResult<Option<PathBuf>> {
        match self.path(cli.clone(), key) {
            Some(_) => self.required_path(cli, key).map(Some),
            None => Ok(None),
        }
    }
}
