//! Settings files and the flag > file > default precedence rule.
//!
//! A settings file is plain `key = value` text: blank lines and `#` comments
//! are ignored, keys must come from the known list (typos fail loudly), and
//! duplicates are rejected. Every command resolves each option by taking the
//! command-line flag when given, else the file value, else the built-in
//! default — and records the effective value in its run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use skinfuse::{Error, Result};

/// Every key any command understands. Commands read the subset they need.
pub const KNOWN_KEYS: [&str; 19] = [
    "augment",
    "batch_size",
    "block",
    "cases",
    "clin_snr",
    "derm_snr",
    "epochs",
    "framework",
    "lr",
    "objective",
    "scale_attention_logits",
    "seed",
    "seeds",
    "size",
    "split",
    "step",
    "swa_window",
    "tta",
    "weights",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read settings file {}: {e}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{} line {}: expected 'key = value', got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{} line {}: unknown setting '{key}'",
                    path.display(),
                    i + 1
                )));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{} line {}: duplicate setting '{key}'",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(Settings { values })
    }

    /// Typed resolution: flag > file > default.
    pub fn resolve<T>(&self, key: &'static str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("setting '{key}': cannot parse {raw:?}: {e}"))),
            None => Ok(default),
        }
    }

    /// String resolution for options with richer syntax than `FromStr`.
    pub fn resolve_raw(&self, key: &str, flag: Option<&str>, default: &str) -> String {
        if let Some(v) = flag {
            return v.to_string();
        }
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}
