//! Declarative `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every command validates its own key set, so typos fail with the offending
//! key named. Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    idx + 1
                );
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                bail!("{}:{}: empty key or value", path.display(), idx + 1);
            }
            if values.insert(key.clone(), value).is_some() {
                bail!("{}:{}: duplicate key '{key}'", path.display(), idx + 1);
            }
        }
        Ok(Self { values })
    }

    /// Reject keys outside the command's documented schema.
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                bail!(
                    "unknown config key '{key}' (expected one of: {})",
                    allowed.join(", ")
                );
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| anyhow::anyhow!("config key '{key}': cannot parse value '{raw}'")),
        }
    }
}

/// Flag wins, then config file, then the built-in default.
pub fn resolve<T: FromStr + Copy>(
    flag: Option<T>,
    config: &FileConfig,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(config.get::<T>(key)?.unwrap_or(default))
}

/// Like [`resolve`] but with no default (stays `None` when absent).
pub fn resolve_opt<T: FromStr + Copy>(
    flag: Option<T>,
    config: &FileConfig,
    key: &str,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    config.get::<T>(key)
}
