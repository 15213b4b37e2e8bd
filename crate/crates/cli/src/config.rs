//! Run-settings plumbing: the plain-text config file, value resolution
//! with flag > file > default precedence, and the small text formats the
//! commands read (task splits, external feature tables).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::{data, usage, CliError};

/// Parsed `key = value` file. Blank lines and `#` comments are skipped;
/// a repeated key keeps its last value.
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> FileConfig {
        FileConfig { values: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| data(format!("cannot read config '{}': {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(data(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    i + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key '{key}': {e} (value '{raw}')"))),
        }
    }
}

pub fn resolve<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => cfg.get(key)?.unwrap_or(default),
    })
}

/// Like [`resolve`] for settings with no default at all.
pub fn optional<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

pub fn require<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    optional(flag, cfg, key)?
        .ok_or_else(|| usage(format!("missing --{key} (no flag, config entry, or default)")))
}

/// Task split file: a `train:` line and a `test:` line, each carrying
/// comma-separated task names. Order does not matter; `#` comments and
/// blank lines are fine.
pub fn load_split(path: &Path) -> Result<(Vec<String>, Vec<String>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read split '{}': {e}", path.display())))?;
    let mut train = None;
    let mut test = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((side, names)) = line.split_once(':') else {
            return Err(data(format!(
                "{}:{}: expected 'train: ...' or 'test: ...', got '{raw}'",
                path.display(),
                i + 1
            )));
        };
        let list = split_names(names);
        match side.trim() {
            "train" => train = Some(list),
            "test" => test = Some(list),
            other => {
                return Err(data(format!(
                    "{}:{}: unknown split side '{other}'",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    match (train, test) {
        (Some(train), Some(test)) => Ok((train, test)),
        _ => Err(data(format!(
            "split '{}' needs both a 'train:' and a 'test:' line",
            path.display()
        ))),
    }
}

pub fn split_names(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|n| n.trim().to_string())
        .filter(|n| !n.is_empty())
        .collect()
}

/// External sequence feature table: `<smiles>\t<v1,...,vd>` per line.
pub fn load_external_features(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read features '{}': {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((smiles, rest)) = line.split_once('\t') else {
            return Err(data(format!(
                "{}:{}: expected '<smiles>\\t<v1,...,vd>'",
                path.display(),
                i + 1
            )));
        };
        let values: Vec<f64> = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| data(format!("{}:{}: bad feature value: {e}", path.display(), i + 1)))?;
        if values.is_empty() {
            return Err(data(format!("{}:{}: empty feature row", path.display(), i + 1)));
        }
        out.insert(smiles.trim().to_string(), values);
    }
    if out.is_empty() {
        return Err(data(format!("feature table '{}' is empty", path.display())));
    }
    Ok(out)
}
