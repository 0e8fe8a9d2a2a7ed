//! `--config FILE` support. The JSON object is turned into flag tokens that
//! are placed before the user's own flags, so later user flags override them.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::Command;
use serde_json::{Map, Value};

/// Global flags that take a value and may appear before the subcommand.
const VALUED_GLOBALS: [&str; 5] = ["--workers", "--seed", "--out", "--format", "--config"];

/// Value of `--config` in raw argv, if any.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--" {
            break;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            found = Some(v.to_string());
        } else if a == "--config" {
            found = args.get(i + 1).cloned();
            i += 1;
        }
        i += 1;
    }
    found
}

/// Index of the subcommand token in raw argv.
fn subcommand_index(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if !a.starts_with('-') {
            return Some(i);
        }
        if VALUED_GLOBALS.contains(&a.as_str()) {
            i += 1;
        }
        i += 1;
    }
    None
}

/// Rewrites argv as `bin sub <config flags> <user flags>`.
pub fn merge(args: Vec<String>, path: &Path, cmd: &Command) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let json: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let obj = json.as_object().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    let Some(sub_at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let sub_name = args[sub_at].clone();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(args);
    };

    let mut tokens = Vec::new();
    let mut section = None;
    for (key, value) in obj {
        if let Value::Object(inner) = value {
            if *key == sub_name {
                section = Some(inner);
            } else if cmd.find_subcommand(key).is_none() {
                bail!("config key `{key}` holds an object but names no subcommand");
            }
            continue;
        }
        match lookup(cmd, sub, key) {
            Some(takes_value) => push_tokens(&mut tokens, key, value, takes_value)?,
            None => log::warn!("config key `{key}` does not apply to `{sub_name}` and is ignored"),
        }
    }
    if let Some(inner) = section {
        push_section(&mut tokens, cmd, sub, &sub_name, inner)?;
    }

    let mut out = vec![args[0].clone(), sub_name];
    out.extend(tokens);
    out.extend(args[1..sub_at].iter().cloned());
    out.extend(args[sub_at + 1..].iter().cloned());
    Ok(out)
}

fn push_section(tokens: &mut Vec<String>, cmd: &Command, sub: &Command, name: &str, inner: &Map<String, Value>) -> Result<()> {
    for (key, value) in inner {
        let takes_value = lookup(cmd, sub, key).ok_or_else(|| anyhow!("config section `{name}` has unknown key `{key}`"))?;
        push_tokens(tokens, key, value, takes_value)?;
    }
    Ok(())
}

/// `Some(takes_value)` when `key` names a flag of the subcommand or a global flag.
fn lookup(root: &Command, sub: &Command, key: &str) -> Option<bool> {
    let long = key.replace('_', "-");
    if long == "config" {
        return None;
    }
    sub.get_arguments()
        .chain(root.get_arguments())
        .find(|a| a.get_long() == Some(long.as_str()))
        .map(|a| a.get_action().takes_values())
}

fn push_tokens(tokens: &mut Vec<String>, key: &str, value: &Value, takes_value: bool) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    if !takes_value {
        match value {
            Value::Bool(true) => tokens.push(flag),
            Value::Bool(false) | Value::Null => {}
            other => bail!("config key `{key}` is a switch and needs true or false, got {other}"),
        }
        return Ok(());
    }
    let text = match value {
        Value::Null => return Ok(()),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(anyhow!("config key `{key}` has an unsupported list item {other}")),
            })
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Value::Object(_) => bail!("config key `{key}` cannot hold an object"),
    };
    tokens.push(format!("{flag}={text}"));
    Ok(())
}
