//! Plain-text `key = value` settings with flag and environment overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "UMID_SEED";

/// Resolved settings: defaults < config file < environment seed < flags.
#[derive(Clone, Debug, Default)]
pub struct Params {
    values: BTreeMap<String, String>,
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::config(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::config(format!("config key {k} given twice")));
        }
    }
    Ok(out)
}

impl Params {
    /// `allowed` lists every key the command understands. A config file must
    /// contain each key in `required`.
    pub fn resolve(
        allowed: &[&str],
        required: &[&str],
        config: Option<&Path>,
        env_seed: Option<&str>,
        flags: Vec<(&str, Option<String>)>,
        sets: &[String],
    ) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("config file {}: {e}", path.display())))?;
            values = parse_config(&text)?;
            if let Some(k) = required.iter().find(|k| !values.contains_key(**k)) {
                return Err(CliError::config(format!("config {} is missing required key {k}", path.display())));
            }
        }
        if let Some(seed) = env_seed {
            if allowed.contains(&"seed") {
                values.insert("seed".into(), seed.to_string());
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects key=value, got {s:?}")))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        if let Some(k) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::config(format!("unknown configuration key {k}")));
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::config(format!("invalid value {v:?} for key {key}: {e}"))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| CliError::config(format!("invalid element {p:?} for key {key}: {e}")))
                })
                .collect(),
        }
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

/// Render a flag value for [`Params::resolve`].
pub fn flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}
