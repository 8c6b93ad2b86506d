//! `key = value` configuration files, flag overrides and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Keys a manifest carries that are not settings.
const RECORD_KEYS: [&str; 2] = ["command", "artifact"];

/// Every settings key any command understands.
pub const KNOWN_KEYS: &[&str] = &[
    "out",
    "seed",
    "classes",
    "input-dim",
    "samples-per-class",
    "sigma",
    "dataset",
    "idx-labels",
    "checkpoint",
    "loss",
    "delta",
    "deltas",
    "seeds",
    "radius",
    "scale",
    "angular-margin",
    "epochs",
    "batch-size",
    "lr",
    "momentum",
    "weight-decay",
    "decay-epochs",
    "decay-factor",
    "hidden",
    "embedding-dim",
    "proxy-weight-decay",
    "negative-proxy-grad",
    "track-geometry",
    "log-every",
    "min-samples",
    "distractors",
    "pairs",
    "trials",
];

pub fn parse_lines(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{origin}:{}: expected 'key = value'",
                n + 1
            )));
        };
        let key = key.trim();
        if RECORD_KEYS.contains(&key) {
            continue;
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "{origin}:{}: unknown key '{key}'",
                n + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Resolves each setting as flag, else file value, else default, and keeps
/// the resolved values in resolution order.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                parse_lines(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.file
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|e| CliError::Usage(format!("config key '{key}': {e}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr + fmt::Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Like [`Resolver::get`] for settings without a default.
    pub fn require<T: FromStr + fmt::Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        let value = value.ok_or_else(|| CliError::Usage(format!("--{key} is required")))?;
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Optional setting; recorded only when present.
    pub fn optional<T: FromStr + fmt::Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    pub fn resolved(&self) -> &[(String, String)] {
        &self.resolved
    }
}

/// Comma-separated list; the empty string is the empty list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|e| format!("bad list item '{}': {e}", item.trim()))
            })
            .collect::<Result<_, _>>()
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

/// Path wrapper so paths resolve through the same machinery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathArg(pub PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(PathArg(PathBuf::from(s)))
    }
}

impl fmt::Display for PathArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

/// Record of one invocation, written as `manifest.txt` in the output directory.
#[derive(Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = format!("# npt run manifest\ncommand = {}\n", self.command);
        for (k, v) in &self.config {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for a in &self.artifacts {
            s.push_str(&format!("artifact = {}\n", a.display()));
        }
        s
    }

    /// Writes the manifest and returns its path.
    pub fn write(&mut self) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join("manifest.txt");
        self.artifacts.push(path.clone());
        fs::write(&path, self.render())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
