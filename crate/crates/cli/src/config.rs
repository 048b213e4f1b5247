//! Flat `key = value` settings files and flag/file/default resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// A bad settings file or an unparsable value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Default => "default",
        })
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may use `_` or `-`.
pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", i + 1)));
        }
        let value = v.trim().trim_matches('"').to_string();
        if out.insert(key.clone(), value).is_some() {
            return Err(ConfigError(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

/// Resolves each setting as flag, then file, then built-in default, and
/// remembers what was chosen so it can be printed.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    effective: Vec<(String, String, Source)>,
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            ..Self::default()
        }
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let file = parse_settings(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Ok(Self::new(file))
    }

    fn file_value<T>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(raw) = self.file.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        raw.parse()
            .map(Some)
            .map_err(|e| ConfigError(format!("config key {key:?}: cannot parse {raw:?}: {e}")))
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, ConfigError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let file = self.file_value(key)?;
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, Source::Flag),
            (None, Some(v)) => (v, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.effective.push((key.to_string(), value.to_string(), source));
        Ok(value)
    }

    /// Like [`Settings::get`] for settings without a default.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, ConfigError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let file = self.file_value(key)?;
        let (value, source) = match (flag, file) {
            (Some(v), _) => (Some(v), Source::Flag),
            (None, Some(v)) => (Some(v), Source::File),
            (None, None) => (None, Source::Default),
        };
        let shown = value.as_ref().map_or("-".to_string(), ToString::to_string);
        self.effective.push((key.to_string(), shown, source));
        Ok(value)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, ConfigError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        self.get_opt(key, flag)?
            .ok_or_else(|| ConfigError(format!("missing required setting `{key}` (flag --{key} or config key)")))
    }

    /// File keys never consulted by the running command.
    pub fn unused_keys(&self) -> Vec<&str> {
        self.file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect()
    }

    #[cfg(test)]
    pub fn effective(&self) -> &[(String, String, Source)] {
        &self.effective
    }

    pub fn render(&self) -> String {
        let width = self.effective.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("# effective configuration\n");
        for (k, v, src) in &self.effective {
            s.push_str(&format!("{k:<width$} = {v}  # {src}\n"));
        }
        s
    }
}

/// Comma-separated list value such as `40,40,20` or `1,3,5`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
