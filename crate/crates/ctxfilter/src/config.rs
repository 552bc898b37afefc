//! Flat TOML configuration files.
//!
//! Every key names a command-line option by its id (`top_k`, `t_c`, ...).
//! File values replace the built-in defaults, so the precedence is
//! flags > environment > file > defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Command;
use thiserror::Error;

/// Prefix of the environment variable for each option.
pub const ENV_PREFIX: &str = "CTXFILTER_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config {path}: unknown key {key:?}")]
    UnknownKey { path: PathBuf, key: String },
    #[error("config {path}: key {key:?} must be a scalar or an array of scalars")]
    BadValue { path: PathBuf, key: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileValue {
    One(String),
    Many(Vec<String>),
}

fn scalar(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn parse_config(path: &Path, text: &str) -> Result<BTreeMap<String, FileValue>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (key, value) in table {
        let bad = || ConfigError::BadValue {
            path: path.to_path_buf(),
            key: key.clone(),
        };
        let v = match &value {
            toml::Value::Array(items) => {
                FileValue::Many(items.iter().map(scalar).collect::<Option<Vec<_>>>().ok_or_else(bad)?)
            }
            other => FileValue::One(scalar(other).ok_or_else(bad)?),
        };
        out.insert(key.replace('-', "_"), v);
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, FileValue>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(path, &text)
}

/// Value of `--config` in raw arguments, before full parsing.
pub fn prescan_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn arg_ids(cmd: &Command) -> BTreeSet<String> {
    let mut ids: BTreeSet<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
    for sub in cmd.get_subcommands() {
        ids.extend(arg_ids(sub));
    }
    ids
}

fn apply(mut cmd: Command, values: &BTreeMap<String, FileValue>) -> Command {
    for (key, value) in values {
        if !cmd.get_arguments().any(|a| a.get_id() == key.as_str()) {
            continue;
        }
        let value = value.clone();
        cmd = cmd.mut_arg(key.as_str(), move |a| match value {
            FileValue::One(v) => a.default_value(v),
            FileValue::Many(vs) => a.default_values(vs),
        });
    }
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| apply(s, values));
    }
    cmd
}

/// Installs file values as defaults on every option they name.
pub fn with_file_defaults(
    cmd: Command,
    path: &Path,
    values: &BTreeMap<String, FileValue>,
) -> Result<Command, ConfigError> {
    let known = arg_ids(&cmd);
    if let Some(key) = values.keys().find(|k| !known.contains(*k)) {
        return Err(ConfigError::UnknownKey {
            path: path.to_path_buf(),
            key: key.clone(),
        });
    }
    Ok(apply(cmd, values))
}
