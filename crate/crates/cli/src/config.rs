//! `key = value` config files merged into the argument list.
//!
//! Each key names a long flag of the chosen subcommand (`batch_size` and
//! `batch-size` both mean `--batch-size`). Flags given on the command line
//! win. Keys that belong to another subcommand are ignored; keys no
//! subcommand knows are rejected.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError(format!("config line {}: empty key", n + 1)));
        }
        let value = v.trim().trim_matches('"').to_owned();
        out.push((key, value));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Result<Option<OsString>, ConfigError> {
    let mut iter = args.iter().skip(1);
    while let Some(a) = iter.next() {
        if a == "--config" {
            return iter.next().cloned().map(Some).ok_or_else(|| ConfigError("--config needs a path".into()));
        }
        if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Ok(Some(p.into()));
        }
    }
    Ok(None)
}

fn subcommand_name<'a>(args: &'a [OsString], cmd: &Command) -> Option<&'a str> {
    args.iter().skip(1).filter_map(|a| a.to_str()).find(|a| cmd.find_subcommand(a).is_some())
}

fn given_on_command_line(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefixed = format!("--{long}=");
    args.iter().filter_map(|a| a.to_str()).any(|a| a == flag || a.starts_with(&prefixed))
}

/// Appends flags from the `--config` file (if any) that are not already
/// present in `args`.
pub fn merge_config(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let entries = parse_config(&text)?;

    let known: BTreeSet<String> = cmd
        .get_subcommands()
        .flat_map(|s| s.get_arguments())
        .chain(cmd.get_arguments())
        .filter_map(|a| a.get_long().map(str::to_owned))
        .collect();
    let Some(sub) = subcommand_name(&args, cmd).and_then(|n| cmd.find_subcommand(n)) else {
        return Ok(args);
    };

    let mut merged = args.clone();
    for (key, value) in entries {
        if !known.contains(&key) {
            return Err(ConfigError(format!("unknown config key `{key}`")));
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            continue;
        };
        if key == "config" || given_on_command_line(&args, &key) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => merged.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => return Err(ConfigError(format!("`{key}` expects true or false, got `{other}`"))),
            }
        } else {
            merged.push(format!("--{key}={value}").into());
        }
    }
    Ok(merged)
}
