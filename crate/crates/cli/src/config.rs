//! `key=value` config files and flag resolution.
//!
//! A value given on the command line wins over the config file, which wins over the
//! built-in default. Keys use the long flag names (`k-inner`; `k_inner` is accepted).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
            let key = normalize(k);
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(UsageError(format!("config line {}: duplicate key {key}", n + 1)).into());
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }
}

/// Resolves one subcommand's settings and records the outcome for the echo.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(file: Option<ConfigFile>) -> Self {
        Self { file: file.map(|f| f.values).unwrap_or_default(), resolved: Vec::new() }
    }

    fn take_file_value<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.file.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| UsageError(format!("config key {key}: invalid value {raw:?}: {e}")).into()),
        }
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let file = self.take_file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// A setting without a default; missing everywhere is a usage error.
    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let file = self.take_file_value(key)?;
        let v = flag.or(file).ok_or_else(|| UsageError(format!("missing required setting --{key}")))?;
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let file = self.take_file_value(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    /// Fails on config keys no setting consumed, then returns the resolved settings
    /// in `key=value` form.
    pub fn finish(&mut self) -> Result<String> {
        if !self.file.is_empty() {
            let keys: Vec<&str> = self.file.keys().map(String::as_str).collect();
            return Err(UsageError(format!("unknown config keys: {}", keys.join(", "))).into());
        }
        Ok(self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect())
    }
}

/// Comma-separated list, e.g. `0.1,1,10`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// A filesystem path that round-trips through `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArg(pub std::path::PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(PathArg(s.into()))
    }
}

impl Display for PathArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}
