//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt;

use clap::{ArgAction, Command};
use serde_json::Value;

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Options that never appear in a run configuration.
const RESERVED: [&str; 5] = ["config", "jobs", "verbose", "help", "version"];

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, UsageError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", i + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(UsageError(format!("config line {}: duplicate key {key}", i + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into command-line tokens for `cmd`, rejecting keys
/// that are not options of that subcommand.
pub fn to_args(cmd: &Command, entries: &[(String, String)]) -> Result<Vec<String>, UsageError> {
    let mut out = Vec::new();
    for (key, value) in entries {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && !RESERVED.contains(&key.as_str()))
            .ok_or_else(|| UsageError(format!("unknown config key `{key}` for `{}`", cmd.get_name())))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                v => return Err(UsageError(format!("config key `{key}` expects true or false, got `{v}`"))),
            },
            _ => out.push(format!("--{key}={value}")),
        }
    }
    Ok(out)
}

/// Renders parsed arguments back into config text.
pub fn render(header: &str, args: &impl serde::Serialize) -> anyhow::Result<String> {
    let Value::Object(map) = serde_json::to_value(args)? else {
        anyhow::bail!("arguments must serialize to a map");
    };
    let mut out = format!("# {header}\n");
    for (key, value) in map {
        let text = match value {
            Value::Null => continue,
            Value::String(s) => s,
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    v => v.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            v => v.to_string(),
        };
        out.push_str(&format!("{key} = {text}\n"));
    }
    Ok(out)
}
