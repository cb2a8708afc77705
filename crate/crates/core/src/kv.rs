//! Flat `key = value` text used by run configs and checkpoint metadata.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines in order. `#` starts a comment; blank lines are
/// skipped. A repeated key is an error.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", ln + 1, raw)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", ln + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: key `{}` given twice", ln + 1, k)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_map(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(parse(text)?.into_iter().collect())
}

/// One `key = value` line per entry, in key order.
pub fn format(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
}

pub(crate) fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{}` for `{}`", v, key)))
}

pub(crate) fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("`{}` takes on|off, got `{}`", key, v))),
    }
}
