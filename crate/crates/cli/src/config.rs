//! Flat `key = value` run configuration.
//!
//! Every key is also a long flag (`sgld_alpha` becomes `--sgld-alpha`).
//! Resolution order is built-in default, then the `--config` file, then
//! flags. Unknown keys in the file are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgMatches, Command};

/// Marker for values the command derives from the data or checkpoint.
pub const AUTO: &str = "auto";
/// Marker for an unset optional value.
pub const NONE: &str = "none";

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Keys shared by every subcommand.
pub const SHARED: &[Key] = &[key("seed", "0", "master seed")];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds `--config`, `--out-dir` and one flag per key.
pub fn add_args(mut cmd: Command, keys: &[Key]) -> Command {
    cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value file"),
        )
        .arg(
            Arg::new("out_dir")
                .long("out-dir")
                .value_name("DIR")
                .required(true)
                .help("directory for all outputs"),
        );
    for k in SHARED.iter().chain(keys) {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default)),
        );
    }
    cmd
}

/// Parses a flat config file. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn resolve(keys: &[Key], m: &ArgMatches) -> Result<Self> {
        let mut values: BTreeMap<String, String> = SHARED
            .iter()
            .chain(keys)
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        if let Some(path) = m.get_one::<String>("config") {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            for (k, v) in parse_file(&text)? {
                match values.get_mut(&k) {
                    Some(slot) => *slot = v,
                    None => bail!("unknown config key `{k}` in {path}"),
                }
            }
        }
        for k in SHARED.iter().chain(keys) {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        let out_dir = PathBuf::from(m.get_one::<String>("out_dir").expect("required"));
        Ok(Self { values, out_dir })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
    }

    /// `None` for `auto` or `none`.
    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            AUTO | NONE => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => bail!("`--{}` is required", flag_name(key)),
            v => Ok(PathBuf::from(v)),
        }
    }

    /// Replaces an `auto` value with what the command derived, so the written
    /// config reproduces the run.
    pub fn settle(&mut self, key: &str, value: impl ToString) {
        if self.raw(key) == AUTO {
            self.values.insert(key.to_string(), value.to_string());
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write(&self) -> Result<()> {
        write_file(&self.out_path(CONFIG_FILE), self.to_text().as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ajem_core::checkpoint::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}
